//! Peak-to-peak gain certificates for the error dynamics, with and without an
//! input filter, the decay-rate linesearch and independent certificate checks.
//!
//! Two solution routes are available.  The conic route hands the LMIs to the
//! SDP backend.  The structured route is exact for fixed `λ`: once the
//! feedthrough `D` of the weighted output is invertible, the filtered problem
//! is a plain peak-gain problem for `(A − BD⁻¹C_y, BD⁻¹, C_z)`, whose optimum
//! is `γ² = λ_max(C Y Cᵀ)/λ` with `Y` the controllability Gramian of the
//! shifted pair `(A + λ/2·I, B)` and `P = γ Y⁻¹`.  Modes of the shifted
//! matrix that are not stable must be invisible in `C_z` and are factored out
//! through the stable left invariant subspace.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{Affine, ConicOptions, ConicProgram, ConicStatus};
use crate::error::{Error, Result};
use crate::linalg::{self, max_eig_sym, min_eig_sym, solve_lyapunov, symmetrize};
use crate::lti::spectral_abscissa;
use crate::reduction::ErrorDynamics;

/// Relative eigenvalue tolerance of certificate checks.
pub const CHECK_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Peak,
    FilteredPeak,
    Iqc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    /// Block must be negative semidefinite; the largest eigenvalue is reported.
    Nsd,
    /// Block must be positive semidefinite; the smallest eigenvalue is reported.
    Psd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockResidual {
    pub name: String,
    pub sense: Sense,
    pub eigenvalue: f64,
    pub scale: f64,
    /// `eigenvalue / scale`.
    pub relative: f64,
}

impl BlockResidual {
    pub(crate) fn nsd(name: &str, m: &DMatrix<f64>, scale: f64) -> Self {
        let eig = max_eig_sym(m);
        let scale = scale.max(f64::MIN_POSITIVE);
        Self { name: name.into(), sense: Sense::Nsd, eigenvalue: eig, scale, relative: eig / scale }
    }

    pub(crate) fn psd(name: &str, m: &DMatrix<f64>, scale: f64) -> Self {
        let eig = min_eig_sym(m);
        let scale = scale.max(f64::MIN_POSITIVE);
        Self { name: name.into(), sense: Sense::Psd, eigenvalue: eig, scale, relative: eig / scale }
    }

    pub fn pass(&self, tol: f64) -> bool {
        match self.sense {
            Sense::Nsd => self.relative <= tol,
            Sense::Psd => self.relative >= -tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub blocks: Vec<BlockResidual>,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(blocks: Vec<BlockResidual>) -> Self {
        let pass = blocks.iter().all(|b| b.pass(CHECK_TOL));
        Self { blocks, pass }
    }

    pub fn worst_relative(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| match b.sense {
                Sense::Nsd => b.relative,
                Sense::Psd => -b.relative,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One linesearch sample.  `gamma` is `None` where the problem was infeasible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GainCertificate {
    pub kind: CertificateKind,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(rename = "P", with = "crate::serde_mat")]
    pub p: DMatrix<f64>,
    pub residuals: Vec<BlockResidual>,
    #[serde(default)]
    pub grid_profile: Vec<GridPoint>,
    /// Diagonal of the disturbance weighting `Γ` (IQC certificates only).
    #[serde(rename = "Gamma", default, skip_serializing_if = "Option::is_none")]
    pub gamma_weights: Option<Vec<f64>>,
    /// Multiplier matrix `X` (IQC certificates only).
    #[serde(rename = "X", default, skip_serializing_if = "Option::is_none", with = "crate::serde_mat::option")]
    pub x_mult: Option<DMatrix<f64>>,
}

impl GainCertificate {
    /// `‖x‖²_P`.
    pub fn weighted_norm_sq(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }

    pub fn passes(&self) -> bool {
        self.residuals.iter().all(|b| b.pass(CHECK_TOL))
    }
}

/// Error dynamics extended by the filter: `χ = [e; ψ]`,
/// `χ̇ = A_χ χ + B_χ r`, `r_ψ = C_χ χ + D_χ r`, `z_e = C_z χ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedErrorSystem {
    #[serde(with = "crate::serde_mat")]
    pub a_chi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b_chi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c_chi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub d_chi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c_z: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub chi0: DVector<f64>,
    /// Number of error states; the filter states follow.
    pub n_e: usize,
}

impl AugmentedErrorSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn from_blocks(
        err: &ErrorDynamics,
        a_psi: &DMatrix<f64>,
        b_psi: &DMatrix<f64>,
        c_psi: &DMatrix<f64>,
        d_psi: &DMatrix<f64>,
    ) -> Result<Self> {
        let (n, np, nr) = (err.a.nrows(), a_psi.nrows(), err.b_e.ncols());
        if !a_psi.is_square() || b_psi.shape() != (np, nr) || c_psi.ncols() != np || d_psi.shape() != (c_psi.nrows(), nr)
        {
            return Err(Error::dim("filter matrices do not match the lumped input"));
        }
        let zero_e = DMatrix::zeros(np, n);
        let a_chi = linalg::block2(&err.a, &DMatrix::zeros(n, np), &zero_e, a_psi);
        let b_chi = linalg::vstack(&[&err.b_e, b_psi]);
        let c_chi = linalg::hstack(&[&DMatrix::zeros(c_psi.nrows(), n), c_psi]);
        let c_z = linalg::hstack(&[&err.c, &DMatrix::zeros(err.c.nrows(), np)]);
        let mut chi0 = DVector::zeros(n + np);
        chi0.rows_mut(0, n).copy_from(&err.e0);
        Ok(Self { a_chi, b_chi, c_chi, d_chi: d_psi.clone(), c_z, chi0, n_e: n })
    }

    /// Identity filter: `r_ψ = r`, no filter states.
    pub fn identity(err: &ErrorDynamics) -> Self {
        let nr = err.b_e.ncols();
        Self::from_blocks(
            err,
            &DMatrix::zeros(0, 0),
            &DMatrix::zeros(0, nr),
            &DMatrix::zeros(nr, 0),
            &DMatrix::identity(nr, nr),
        )
        .expect("identity filter dimensions are consistent")
    }

    pub fn n_states(&self) -> usize {
        self.a_chi.nrows()
    }

    pub fn n_filter(&self) -> usize {
        self.n_states() - self.n_e
    }

    pub fn lmi_data(&self) -> PeakLmiData {
        PeakLmiData {
            a: self.a_chi.clone(),
            b: self.b_chi.clone(),
            c_y: self.c_chi.clone(),
            d_y: self.d_chi.clone(),
            c_z: self.c_z.clone(),
        }
    }
}

/// Data of the output-to-output peak LMIs
/// `[λP + AᵀP + PA, PB; BᵀP, 0] − γ[C_y D_y]ᵀ[C_y D_y] ⪯ 0`,
/// `[γI, C_z; C_zᵀ, λP] ⪰ 0`, `P ⪰ 0`.  The plain peak problem has
/// `C_y = 0`, `D_y = I`.
#[derive(Clone, Debug)]
pub struct PeakLmiData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub d_y: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
}

impl PeakLmiData {
    pub fn from_error(err: &ErrorDynamics) -> Self {
        let (n, nr) = (err.a.nrows(), err.b_e.ncols());
        Self {
            a: err.a.clone(),
            b: err.b_e.clone(),
            c_y: DMatrix::zeros(nr, n),
            d_y: DMatrix::identity(nr, nr),
            c_z: err.c.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        if !self.a.is_square()
            || self.b.nrows() != n
            || self.c_y.ncols() != n
            || self.d_y.shape() != (self.c_y.nrows(), m)
            || self.c_z.ncols() != n
        {
            return Err(Error::dim("peak LMI data"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMethod {
    /// Structured route whenever `D_y` is square and invertible.
    #[default]
    Auto,
    Conic,
    Structured,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Smallest `γ`, ties toward larger `λ`.
    #[default]
    Gamma,
    /// Smallest `γ/√λ`.
    GammaOverSqrtLambda,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthesisOptions {
    pub method: SynthesisMethod,
    /// Relative strictness margin on the decay block.
    pub slack: f64,
    pub selection: Selection,
    pub conic: ConicOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            method: SynthesisMethod::Auto,
            slack: 1e-9,
            selection: Selection::Gamma,
            conic: ConicOptions::default(),
        }
    }
}

/// Residuals of the three LMI blocks for a candidate `(P, λ, γ)`.
pub fn check_lmi(data: &PeakLmiData, p: &DMatrix<f64>, lambda: f64, gamma: f64) -> CheckReport {
    let (n, m) = (data.a.nrows(), data.b.ncols());
    let atp = data.a.transpose() * p;
    let pb = p * &data.b;
    let cd = linalg::hstack(&[&data.c_y, &data.d_y]);
    let weight = cd.transpose() * &cd;
    let mut decay = DMatrix::zeros(n + m, n + m);
    decay.view_mut((0, 0), (n, n)).copy_from(&(p * lambda + &atp + atp.transpose()));
    decay.view_mut((0, n), (n, m)).copy_from(&pb);
    decay.view_mut((n, 0), (m, n)).copy_from(&pb.transpose());
    decay -= &weight * gamma;
    let decay_scale = lambda * p.norm() + 2.0 * atp.norm() + 2.0 * pb.norm() + gamma * weight.norm();

    let nz = data.c_z.nrows();
    let mut out = DMatrix::zeros(nz + n, nz + n);
    out.view_mut((0, 0), (nz, nz)).fill_diagonal(gamma);
    out.view_mut((0, nz), (nz, n)).copy_from(&data.c_z);
    out.view_mut((nz, 0), (n, nz)).copy_from(&data.c_z.transpose());
    out.view_mut((nz, nz), (n, n)).copy_from(&(p * lambda));
    let out_scale = gamma * (nz as f64).sqrt() + 2.0 * data.c_z.norm() + lambda * p.norm();

    CheckReport::new(vec![
        BlockResidual::nsd("decay", &decay, decay_scale),
        BlockResidual::psd("output", &out, out_scale),
        BlockResidual::psd("P", p, p.norm()),
    ])
}

/// Independent re-check of a peak or filtered-peak certificate.
pub fn check_certificate(cert: &GainCertificate, data: &PeakLmiData) -> CheckReport {
    check_lmi(data, &cert.p, cert.lambda, cert.gamma)
}

/// Minimal `γ` and certificate for the plain peak problem of the pair
/// `(a, b)` with output `c`, assuming `a + λ/2·I` is Hurwitz.  The Gramian is
/// inflated by `ε Z` (`Z` the Gramian of `(a + λ/2·I, I)`) so that the decay
/// block holds strictly.
fn gramian_peak(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    lambda: f64,
    slack: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let n = a.nrows();
    let shifted = a + DMatrix::identity(n, n) * (lambda / 2.0);
    let alpha = spectral_abscissa(&shifted)?;
    if alpha >= 0.0 {
        return Err(Error::Infeasible(format!(
            "λ = {lambda:.4e} exceeds twice the decay rate of the dynamics"
        )));
    }
    let y = solve_lyapunov(&shifted, &(b * b.transpose()))?;
    let z = solve_lyapunov(&shifted, &DMatrix::identity(n, n))?;
    let eps = slack.max(1e-15) * y.norm().max(1e-300) / z.norm();
    let x = symmetrize(&(&y + &z * eps));
    let g2 = max_eig_sym(&(c * &x * c.transpose())).max(0.0) / lambda;
    let gamma = g2.sqrt().max(1e-12);
    let chol = x
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("regularized Gramian is not positive definite".into()))?;
    let p = symmetrize(&(chol.inverse() * gamma));
    Ok((gamma, p))
}

fn structured_solve(data: &PeakLmiData, lambda: f64, slack: f64) -> Result<(f64, DMatrix<f64>)> {
    let n = data.a.nrows();
    let d_inv = data
        .d_y
        .clone()
        .try_inverse()
        .filter(|_| data.d_y.is_square())
        .ok_or_else(|| Error::InvalidArgument("structured route needs a square invertible D_y".into()))?;
    let b_t = &data.b * &d_inv;
    let a_t = &data.a - &b_t * &data.c_y;
    let shifted = &a_t + DMatrix::identity(n, n) * (lambda / 2.0);
    let eig = linalg::eigenvalues(&shifted)?;
    let tol = 1e-10 * (1.0 + shifted.norm());
    if eig.iter().any(|l| l.re.abs() <= tol) {
        return Err(Error::Infeasible(format!(
            "shifted closed-loop matrix has an eigenvalue on the imaginary axis at λ = {lambda:.4e}"
        )));
    }
    if eig.iter().all(|l| l.re < 0.0) {
        return gramian_peak(&a_t, &b_t, &data.c_z, lambda, slack);
    }

    // Left invariant subspace L of the stable modes: L Ã = Ã_s L.  The
    // unstable modes must not be observable through C_z.
    let split = leading_stable_block(&a_t, lambda)?;
    let (l, a_s) = match split {
        Some(k) => {
            let a11 = a_t.view((0, 0), (k, k)).into_owned();
            let a12 = a_t.view((0, k), (k, n - k)).into_owned();
            let a22 = a_t.view((k, k), (n - k, n - k)).into_owned();
            let x = linalg::solve_sylvester(&a11, &(-a22), &a12)?;
            (linalg::hstack(&[&DMatrix::identity(k, k), &x]), a11)
        }
        None => {
            let l = linalg::stable_left_subspace(&shifted)?;
            let a_s = &l * &a_t * l.transpose();
            (l, a_s)
        }
    };
    // C_z = C_s L; with L = [I, X] this picks the leading columns.
    let c_s = match split {
        Some(k) => data.c_z.columns(0, k).into_owned(),
        None => &data.c_z * l.transpose(),
    };
    let mismatch = (&data.c_z - &c_s * &l).norm();
    if mismatch > 1e-8 * (data.c_z.norm() * (1.0 + l.norm())).max(1e-300) {
        return Err(Error::Infeasible(format!(
            "output sees modes that the weighted output cannot bound (mismatch {mismatch:.2e})"
        )));
    }
    let b_s = &l * &b_t;
    let (gamma, p_s) = gramian_peak(&a_s, &b_s, &c_s, lambda, slack)?;
    Ok((gamma, symmetrize(&(l.transpose() * p_s * &l))))
}

/// Size `k` of a leading block when `a` is block upper triangular with the
/// shifted leading block Hurwitz and the trailing block anti-stable.
fn leading_stable_block(a: &DMatrix<f64>, lambda: f64) -> Result<Option<usize>> {
    let n = a.nrows();
    let scale = a.norm().max(1e-300);
    for k in 1..n {
        if a.view((k, 0), (n - k, k)).norm() > 1e-14 * scale {
            continue;
        }
        let shift = lambda / 2.0;
        let lead = linalg::eigenvalues(&a.view((0, 0), (k, k)).into_owned())?;
        let trail = linalg::eigenvalues(&a.view((k, k), (n - k, n - k)).into_owned())?;
        if lead.iter().all(|l| l.re + shift < 0.0) && trail.iter().all(|l| l.re + shift > 0.0) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

pub(crate) fn sym_vars(prog: &mut ConicProgram, n: usize) -> Vec<Vec<usize>> {
    let mut idx = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = prog.var();
            idx[i][j] = v;
            idx[j][i] = v;
        }
    }
    idx
}

fn conic_solve(data: &PeakLmiData, lambda: f64, opts: &SynthesisOptions) -> Result<(f64, DMatrix<f64>)> {
    let (n, m, nz) = (data.a.nrows(), data.b.ncols(), data.c_z.nrows());
    let mut prog = ConicProgram::new();
    let g = prog.var();
    let pv = sym_vars(&mut prog, n);
    let cd = linalg::hstack(&[&data.c_y, &data.d_y]);
    let weight = cd.transpose() * &cd;
    let eps = opts.slack * (1.0 + data.a.norm() + data.b.norm());

    // −(decay block) − εI ⪰ 0
    let mut blk = vec![vec![Affine::default(); n + m]; n + m];
    for i in 0..n {
        for j in i..n {
            let e = &mut blk[i][j];
            e.add_term(pv[i][j], -lambda);
            for k in 0..n {
                e.add_term(pv[k][j], -data.a[(k, i)]);
                e.add_term(pv[i][k], -data.a[(k, j)]);
            }
        }
        for j in 0..m {
            let e = &mut blk[i][n + j];
            for k in 0..n {
                e.add_term(pv[i][k], -data.b[(k, j)]);
            }
        }
    }
    for i in 0..n + m {
        for j in i..n + m {
            blk[i][j].add_term(g, weight[(i, j)]);
            if i == j {
                blk[i][j].add_const(-eps);
            }
        }
    }
    prog.psd(&blk);

    let mut out = vec![vec![Affine::default(); nz + n]; nz + n];
    for i in 0..nz {
        out[i][i] = Affine::var(g);
        for j in 0..n {
            out[i][nz + j] = Affine::constant(data.c_z[(i, j)]);
        }
    }
    for i in 0..n {
        for j in i..n {
            out[nz + i][nz + j] = Affine::term(pv[i][j], lambda);
        }
    }
    prog.psd(&out);

    let pm: Vec<Vec<Affine>> = (0..n).map(|i| (0..n).map(|j| Affine::var(pv[i][j])).collect()).collect();
    prog.psd(&pm);
    prog.minimize(Affine::var(g));

    let sol = prog.solve(&opts.conic)?;
    match sol.status {
        ConicStatus::Optimal => {}
        ConicStatus::Infeasible => {
            return Err(Error::Infeasible(format!("peak LMI infeasible at λ = {lambda:.4e}")))
        }
        other => return Err(Error::Solver(format!("SDP ended with status {other:?}"))),
    }
    let p = DMatrix::from_fn(n, n, |i, j| sol.x[pv[i][j]]);
    Ok((sol.x[g].max(0.0), p))
}

pub(crate) fn solve_with(data: &PeakLmiData, lambda: f64, opts: &SynthesisOptions) -> Result<(f64, DMatrix<f64>)> {
    data.validate()?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument("λ must be positive".into()));
    }
    let structured_ok = data.d_y.is_square() && data.d_y.clone().try_inverse().is_some();
    match opts.method {
        SynthesisMethod::Conic => conic_solve(data, lambda, opts),
        SynthesisMethod::Structured => structured_solve(data, lambda, opts.slack),
        SynthesisMethod::Auto if structured_ok => structured_solve(data, lambda, opts.slack),
        SynthesisMethod::Auto => conic_solve(data, lambda, opts),
    }
}

fn certify(
    kind: CertificateKind,
    data: &PeakLmiData,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<GainCertificate> {
    let (gamma, p) = solve_with(data, lambda, opts)?;
    let report = check_lmi(data, &p, lambda, gamma);
    if !report.pass {
        return Err(Error::Numerical(format!(
            "certificate at λ = {lambda:.4e} failed its re-check (worst relative residual {:.2e})",
            report.worst_relative()
        )));
    }
    Ok(GainCertificate {
        kind,
        lambda,
        gamma,
        p,
        residuals: report.blocks,
        grid_profile: Vec::new(),
        gamma_weights: None,
        x_mult: None,
    })
}

/// Minimal peak-to-peak gain from `r` to `z_e` at decay rate `λ`.
pub fn peak_gain_lmi(err: &ErrorDynamics, lambda: f64) -> Result<GainCertificate> {
    peak_gain_lmi_with(err, lambda, &SynthesisOptions::default())
}

pub fn peak_gain_lmi_with(err: &ErrorDynamics, lambda: f64, opts: &SynthesisOptions) -> Result<GainCertificate> {
    require_stable(&err.a)?;
    certify(CertificateKind::Peak, &PeakLmiData::from_error(err), lambda, opts)
}

/// Minimal output-to-output gain from the filtered input `r_ψ` to `z_e`.
pub fn filtered_peak_gain_lmi(aug: &AugmentedErrorSystem, lambda: f64) -> Result<GainCertificate> {
    filtered_peak_gain_lmi_with(aug, lambda, &SynthesisOptions::default())
}

pub fn filtered_peak_gain_lmi_with(
    aug: &AugmentedErrorSystem,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<GainCertificate> {
    require_stable(&aug.a_chi)?;
    certify(CertificateKind::FilteredPeak, &aug.lmi_data(), lambda, opts)
}

fn require_stable(a: &DMatrix<f64>) -> Result<()> {
    let abscissa = spectral_abscissa(a)?;
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { abscissa });
    }
    Ok(())
}

/// `n` equally spaced decay rates strictly inside `(0, 2|α(a)|)`.
pub fn default_lambda_grid(a: &DMatrix<f64>, n: usize) -> Result<Vec<f64>> {
    let alpha = spectral_abscissa(a)?;
    if alpha >= 0.0 {
        return Err(Error::NotHurwitz { abscissa: alpha });
    }
    let hi = -2.0 * alpha;
    Ok((1..=n).map(|k| k as f64 * hi / (n + 1) as f64).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

/// Explicit grid `lo..=hi` with `n` points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl LambdaGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0 && self.hi >= self.lo && self.n >= 1) {
            return Err(Error::InvalidArgument("λ grid needs 0 < lo ≤ hi and n ≥ 1".into()));
        }
        if self.n == 1 {
            return Ok(vec![self.lo]);
        }
        let step = |k: usize| k as f64 / (self.n - 1) as f64;
        Ok(match self.spacing {
            Spacing::Linear => (0..self.n).map(|k| self.lo + step(k) * (self.hi - self.lo)).collect(),
            Spacing::Log => (0..self.n)
                .map(|k| (self.lo.ln() + step(k) * (self.hi.ln() - self.lo.ln())).exp())
                .collect(),
        })
    }
}

impl std::str::FromStr for LambdaGrid {
    type Err = Error;

    /// `"lo:hi:n"`, with an optional `":log"` suffix.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidArgument(format!("λ grid must look like lo:hi:n[:log], got {s:?}"));
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad());
        }
        let spacing = match parts.get(3) {
            None | Some(&"lin") => Spacing::Linear,
            Some(&"log") => Spacing::Log,
            _ => return Err(bad()),
        };
        let grid = Self {
            lo: parts[0].trim().parse().map_err(|_| bad())?,
            hi: parts[1].trim().parse().map_err(|_| bad())?,
            n: parts[2].trim().parse().map_err(|_| bad())?,
            spacing,
        };
        grid.points()?;
        Ok(grid)
    }
}

fn objective(sel: Selection, lambda: f64, gamma: f64) -> f64 {
    match sel {
        Selection::Gamma => gamma,
        Selection::GammaOverSqrtLambda => gamma / lambda.sqrt(),
    }
}

/// Solves at each grid point and keeps the best certificate under
/// `selection`; the whole `(λ, γ)` profile is attached to the result.
pub fn linesearch_by<F>(grid: &[f64], selection: Selection, mut solve: F) -> Result<GainCertificate>
where
    F: FnMut(f64) -> Result<GainCertificate>,
{
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty λ grid".into()));
    }
    let mut profile = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, GainCertificate)> = None;
    let mut last_err = None;
    for &lambda in grid {
        match solve(lambda) {
            Ok(cert) => {
                profile.push(GridPoint { lambda, gamma: Some(cert.gamma), status: "optimal".into() });
                let obj = objective(selection, cert.lambda, cert.gamma);
                let better = match &best {
                    None => true,
                    Some((b, c)) => {
                        obj < b * (1.0 - 1e-9) || (obj <= b * (1.0 + 1e-9) && cert.lambda > c.lambda)
                    }
                };
                if better {
                    best = Some((obj, cert));
                }
            }
            Err(e) => {
                let status = if e.is_infeasible() { "infeasible".to_string() } else { format!("error: {e}") };
                profile.push(GridPoint { lambda, gamma: None, status });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, mut cert)) => {
            cert.grid_profile = profile;
            Ok(cert)
        }
        None => Err(Error::Infeasible(format!(
            "no λ in the grid admits a certificate (last failure: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))),
    }
}

/// Problems the linesearch can sweep.
pub enum LinesearchProblem<'a> {
    Peak(&'a ErrorDynamics),
    FilteredPeak(&'a AugmentedErrorSystem),
}

pub fn lambda_linesearch(
    problem: LinesearchProblem<'_>,
    grid: &[f64],
    opts: &SynthesisOptions,
) -> Result<GainCertificate> {
    match problem {
        LinesearchProblem::Peak(err) => {
            linesearch_by(grid, opts.selection, |l| peak_gain_lmi_with(err, l, opts))
        }
        LinesearchProblem::FilteredPeak(aug) => {
            linesearch_by(grid, opts.selection, |l| filtered_peak_gain_lmi_with(aug, l, opts))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> ErrorDynamics {
        ErrorDynamics {
            a: DMatrix::from_element(1, 1, -1.0),
            b_e: DMatrix::from_element(1, 1, 1.0),
            c: DMatrix::from_element(1, 1, 1.0),
            e0: DVector::zeros(1),
            n_w: 0,
            n_r: 0,
            n_u: 1,
        }
    }

    fn closed_form(l: f64) -> f64 {
        1.0 / (l * (2.0 - l)).sqrt()
    }

    #[test]
    fn scalar_optimum_both_routes() {
        for method in [SynthesisMethod::Structured, SynthesisMethod::Conic] {
            let opts = SynthesisOptions { method, ..Default::default() };
            let cert = peak_gain_lmi_with(&scalar(), 1.0, &opts).unwrap();
            assert!((cert.gamma - 1.0).abs() < 1e-5, "{method:?}: {}", cert.gamma);
            assert!((cert.p[(0, 0)] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn scalar_profile() {
        for l in [0.2, 0.7, 1.3, 1.9] {
            let cert = peak_gain_lmi(&scalar(), l).unwrap();
            assert!((cert.gamma / closed_form(l) - 1.0).abs() < 1e-6);
        }
        assert!(peak_gain_lmi(&scalar(), 2.0).unwrap_err().is_infeasible());
    }

    #[test]
    fn exact_certificate_residuals() {
        let data = PeakLmiData::from_error(&scalar());
        let p = DMatrix::from_element(1, 1, 1.0);
        let ok = check_lmi(&data, &p, 1.0, 1.0);
        assert!(ok.pass);
        assert!(ok.blocks[..2].iter().all(|b| b.eigenvalue.abs() < 1e-12));
        assert!(!check_lmi(&data, &p, 1.0, 0.9).pass);
        assert!(!check_lmi(&data, &DMatrix::zeros(1, 1), 1.0, 1.0).pass);
    }

    #[test]
    fn zero_output_gives_tiny_gain() {
        let mut err = scalar();
        err.c = DMatrix::zeros(1, 1);
        assert!(peak_gain_lmi(&err, 1.0).unwrap().gamma <= 1e-6);
    }

    #[test]
    fn linesearch_selects_center() {
        let opts = SynthesisOptions::default();
        let cert = lambda_linesearch(LinesearchProblem::Peak(&scalar()), &[0.5, 1.0, 1.5], &opts).unwrap();
        assert_eq!(cert.lambda, 1.0);
        assert_eq!(cert.grid_profile.len(), 3);
        let single = lambda_linesearch(LinesearchProblem::Peak(&scalar()), &[2.5], &opts);
        assert!(single.unwrap_err().is_infeasible());
    }

    #[test]
    fn grid_parsing() {
        let g: LambdaGrid = "0.1:0.5:5".parse().unwrap();
        let pts = g.points().unwrap();
        assert_eq!(pts.len(), 5);
        assert!((pts[4] - 0.5).abs() < 1e-15);
        assert!("0.1:0.5".parse::<LambdaGrid>().is_err());
        assert!("-1:0.5:3".parse::<LambdaGrid>().is_err());
        let lg: LambdaGrid = "0.01:1:3:log".parse().unwrap();
        assert!((lg.points().unwrap()[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn default_grid_is_interior() {
        let g = default_lambda_grid(&DMatrix::from_element(1, 1, -1.0), 10).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g[0] > 0.0 && g[9] < 2.0);
    }

    #[test]
    fn certificate_json_round_trip() {
        let cert = peak_gain_lmi(&scalar(), 1.0).unwrap();
        let s = serde_json::to_string(&cert).unwrap();
        assert!(s.contains("\"kind\":\"peak\""));
        let back: GainCertificate = serde_json::from_str(&s).unwrap();
        assert_eq!(back.p, cert.p);
    }
}
