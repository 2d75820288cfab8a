//! Peak reachability for uncertain systems described by α-IQCs:
//!
//! `ξ̇ = A ξ + B w`, `y = C ξ + D w`, `z_e = C_z ξ`, with
//! `∫₀ᵗ e^{2ατ} yᵀM y dτ + e^{2αt} ξᵀXξ ≥ 0`.
//!
//! A certificate `(P, Γ, γ)` yields `‖z_e‖²/(αγ) ≤ ξᵀ(P − X)ξ ≤ δ` with
//! `δ̇ = −2αδ + ‖w‖²_Γ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounding::comparison_step;
use crate::conic::{Affine, ConicProgram, ConicStatus};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::SampledSignal;
use crate::reduction::ErrorDynamics;
use crate::synthesis::{
    peak_gain_lmi_with, solve_with, sym_vars, BlockResidual, CertificateKind, CheckReport, GainCertificate,
    PeakLmiData, SynthesisMethod, SynthesisOptions,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IqcSystem {
    #[serde(with = "crate::serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub d: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c_z: DMatrix<f64>,
}

impl IqcSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, c_z: DMatrix<f64>) -> Result<Self> {
        let s = Self { a, b, c, d, c_z };
        s.validate()?;
        Ok(s)
    }

    /// `ξ = e`, `w = r`, no IQC output.
    pub fn from_error(err: &ErrorDynamics) -> Self {
        let (n, m) = (err.a.nrows(), err.b_e.ncols());
        Self {
            a: err.a.clone(),
            b: err.b_e.clone(),
            c: DMatrix::zeros(0, n),
            d: DMatrix::zeros(0, m),
            c_z: err.c.clone(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_iqc_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        if !self.a.is_square()
            || self.b.nrows() != n
            || self.c.ncols() != n
            || self.d.shape() != (self.c.nrows(), m)
            || self.c_z.ncols() != n
        {
            return Err(Error::dim("IQC system matrices"));
        }
        for m in [&self.a, &self.b, &self.c, &self.d, &self.c_z] {
            if !linalg::all_finite(m) {
                return Err(Error::NonFinite("IQC system"));
            }
        }
        Ok(())
    }
}

/// Multiplier `(M, X)` of the α-IQC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Multiplier {
    /// `M = 0`, `X = 0`.
    Trivial,
    /// Static `w_Δ = Δ y_Δ` with `‖Δ‖ ≤ ρ`.  The IQC output is
    /// `y = [y_Δ; w_Δ]` with `n_y` rows of `y_Δ`, and
    /// `M = τ diag(ρ² I, −I)` with a free `τ ≥ 0`.
    NormBound { rho: f64, n_y: usize },
    /// Given matrices.
    Fixed {
        #[serde(with = "crate::serde_mat")]
        m: DMatrix<f64>,
        #[serde(with = "crate::serde_mat")]
        x: DMatrix<f64>,
    },
}

impl Multiplier {
    fn validate(&self, sys: &IqcSystem) -> Result<()> {
        let (n, ny) = (sys.n_states(), sys.n_iqc_outputs());
        match self {
            Multiplier::Trivial => Ok(()),
            Multiplier::NormBound { rho, n_y } => {
                if !(*rho >= 0.0 && rho.is_finite()) {
                    return Err(Error::InvalidArgument("norm bound must be non-negative".into()));
                }
                if *n_y > ny {
                    return Err(Error::dim("norm-bound split exceeds the IQC output"));
                }
                Ok(())
            }
            Multiplier::Fixed { m, x } => {
                if m.shape() != (ny, ny) || x.shape() != (n, n) {
                    return Err(Error::dim("multiplier matrices"));
                }
                if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax())
                    || (x - x.transpose()).amax() > 1e-12 * (1.0 + x.amax())
                {
                    return Err(Error::InvalidArgument("multipliers must be symmetric".into()));
                }
                Ok(())
            }
        }
    }

    fn is_trivial(&self) -> bool {
        match self {
            Multiplier::Trivial => true,
            Multiplier::Fixed { m, x } => m.amax() == 0.0 && x.amax() == 0.0,
            Multiplier::NormBound { .. } => false,
        }
    }

    /// `M` for a given `τ` (ignored unless norm-bound).
    fn m_matrix(&self, ny: usize, tau: f64) -> DMatrix<f64> {
        match self {
            Multiplier::Trivial => DMatrix::zeros(ny, ny),
            Multiplier::NormBound { rho, n_y } => {
                let mut m = DMatrix::zeros(ny, ny);
                for i in 0..ny {
                    m[(i, i)] = if i < *n_y { tau * rho * rho } else { -tau };
                }
                m
            }
            Multiplier::Fixed { m, .. } => m.clone(),
        }
    }

    fn x_matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Multiplier::Fixed { x, .. } => x.clone(),
            _ => DMatrix::zeros(n, n),
        }
    }
}

/// Structure of `Γ`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GammaMode {
    /// `Γ = γI`; minimizes `γ`.
    #[default]
    Tied,
    /// Diagonal `Γ` with `γ = 1` fixed; minimizes `Σ cᵢ Γᵢᵢ`.  Minimizing `γ`
    /// with a free `Γ` is unbounded (scale `P` and `Γ` up, `γ` down).
    Diagonal { weights: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IqcCertificate {
    pub alpha: f64,
    pub gamma: f64,
    #[serde(rename = "P", with = "crate::serde_mat")]
    pub p: DMatrix<f64>,
    /// Diagonal of `Γ`.
    #[serde(rename = "Gamma")]
    pub gamma_weights: Vec<f64>,
    #[serde(rename = "M", with = "crate::serde_mat")]
    pub m: DMatrix<f64>,
    #[serde(rename = "X", with = "crate::serde_mat")]
    pub x: DMatrix<f64>,
    pub tau: Option<f64>,
    pub residuals: Vec<BlockResidual>,
}

impl IqcCertificate {
    /// `‖w‖²_Γ`.
    pub fn weighted_input_sq(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.gamma_weights).map(|(v, g)| g * v * v).sum()
    }

    /// `ξᵀ(P − X)ξ`.
    pub fn storage(&self, xi: &DVector<f64>) -> f64 {
        (xi.transpose() * (&self.p - &self.x) * xi)[(0, 0)]
    }

    /// Output bound `√(αγδ)`.
    pub fn output_bound(&self, delta: f64) -> f64 {
        (self.alpha * self.gamma * delta.max(0.0)).sqrt()
    }

    /// Steady-state gain from `sup ‖w‖` to `sup ‖z_e‖`: `√(γ λmax(Γ)/2)`.
    pub fn implied_peak_gain(&self) -> f64 {
        let g = self.gamma_weights.iter().cloned().fold(0.0, f64::max);
        (self.gamma * g / 2.0).sqrt()
    }

    /// Certificate in the shared schema (`λ = 2α`).
    pub fn to_gain_certificate(&self) -> GainCertificate {
        GainCertificate {
            kind: CertificateKind::Iqc,
            lambda: 2.0 * self.alpha,
            gamma: self.gamma,
            p: self.p.clone(),
            residuals: self.residuals.clone(),
            grid_profile: Vec::new(),
            gamma_weights: Some(self.gamma_weights.clone()),
            x_mult: Some(self.x.clone()),
        }
    }
}

/// Independent eigenvalue check of the decay and output LMIs.
pub fn check_iqc(sys: &IqcSystem, cert: &IqcCertificate) -> CheckReport {
    let (n, m, nz) = (sys.n_states(), sys.n_inputs(), sys.c_z.nrows());
    let p = &cert.p;
    let atp = sys.a.transpose() * p;
    let pb = p * &sys.b;
    let cd = linalg::hstack(&[&sys.c, &sys.d]);
    let mterm = cd.transpose() * &cert.m * &cd;
    let mut decay = DMatrix::zeros(n + m, n + m);
    decay.view_mut((0, 0), (n, n)).copy_from(&(p * (2.0 * cert.alpha) + &atp + atp.transpose()));
    decay.view_mut((0, n), (n, m)).copy_from(&pb);
    decay.view_mut((n, 0), (m, n)).copy_from(&pb.transpose());
    decay += &mterm;
    for (i, g) in cert.gamma_weights.iter().enumerate() {
        decay[(n + i, n + i)] -= g;
    }
    let gmax = cert.gamma_weights.iter().cloned().fold(0.0, f64::max);
    let decay_scale = 2.0 * cert.alpha * p.norm() + 2.0 * atp.norm() + 2.0 * pb.norm() + mterm.norm() + gmax;

    let px = p - &cert.x;
    let mut out = DMatrix::zeros(nz + n, nz + n);
    out.view_mut((0, 0), (nz, nz)).fill_diagonal(cert.gamma);
    out.view_mut((0, nz), (nz, n)).copy_from(&sys.c_z);
    out.view_mut((nz, 0), (n, nz)).copy_from(&sys.c_z.transpose());
    out.view_mut((nz, nz), (n, n)).copy_from(&(&px * cert.alpha));
    let out_scale = cert.gamma * (nz as f64).sqrt() + 2.0 * sys.c_z.norm() + cert.alpha * px.norm();

    let mut blocks = vec![
        BlockResidual::nsd("decay", &decay, decay_scale),
        BlockResidual::psd("output", &out, out_scale),
        BlockResidual::psd("P-X", &px, p.norm() + cert.x.norm()),
    ];
    if cert.gamma_weights.iter().any(|g| *g < 0.0) {
        let g = DMatrix::from_diagonal(&DVector::from_vec(cert.gamma_weights.clone()));
        blocks.push(BlockResidual::psd("Gamma", &g, gmax));
    }
    CheckReport::new(blocks)
}

/// Solves the IQC peak LMIs at rate `α`.
pub fn iqc_peak_lmi(
    sys: &IqcSystem,
    mult: &Multiplier,
    mode: &GammaMode,
    alpha: f64,
    opts: &SynthesisOptions,
) -> Result<IqcCertificate> {
    sys.validate()?;
    mult.validate(sys)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument("α must be positive".into()));
    }
    if let GammaMode::Diagonal { weights } = mode {
        if weights.len() != sys.n_inputs() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("Γ weights must be positive, one per input".into()));
        }
    }
    let structured = mult.is_trivial() && *mode == GammaMode::Tied;
    let cert = match opts.method {
        SynthesisMethod::Conic => conic_iqc(sys, mult, mode, alpha, opts)?,
        SynthesisMethod::Structured if !structured => {
            return Err(Error::InvalidArgument("structured route needs the trivial multiplier and a tied Γ".into()))
        }
        _ if structured => structured_iqc(sys, alpha, opts)?,
        _ => conic_iqc(sys, mult, mode, alpha, opts)?,
    };
    let report = check_iqc(sys, &cert);
    if !report.pass {
        return Err(Error::Numerical(format!(
            "IQC certificate at α = {alpha:.4e} failed its re-check (worst relative residual {:.2e})",
            report.worst_relative()
        )));
    }
    Ok(IqcCertificate { residuals: report.blocks, ..cert })
}

/// With `M = 0`, `X = 0`, `Γ = γI` the decay LMI is the peak one at
/// `λ = 2α` and the output LMI carries `α P` instead of `λ P`; scaling the
/// peak solution by `√2` is optimal.
fn structured_iqc(sys: &IqcSystem, alpha: f64, opts: &SynthesisOptions) -> Result<IqcCertificate> {
    let (n, m) = (sys.n_states(), sys.n_inputs());
    let data = PeakLmiData {
        a: sys.a.clone(),
        b: sys.b.clone(),
        c_y: DMatrix::zeros(m, n),
        d_y: DMatrix::identity(m, m),
        c_z: sys.c_z.clone(),
    };
    let mut o = opts.clone();
    o.method = SynthesisMethod::Structured;
    let (gamma, p) = solve_with(&data, 2.0 * alpha, &o)?;
    let k = std::f64::consts::SQRT_2;
    let ny = sys.n_iqc_outputs();
    Ok(IqcCertificate {
        alpha,
        gamma: k * gamma,
        p: p * k,
        gamma_weights: vec![k * gamma; m],
        m: DMatrix::zeros(ny, ny),
        x: DMatrix::zeros(n, n),
        tau: None,
        residuals: Vec::new(),
    })
}

fn conic_iqc(
    sys: &IqcSystem,
    mult: &Multiplier,
    mode: &GammaMode,
    alpha: f64,
    opts: &SynthesisOptions,
) -> Result<IqcCertificate> {
    let (n, m, nz, ny) = (sys.n_states(), sys.n_inputs(), sys.c_z.nrows(), sys.n_iqc_outputs());
    let mut prog = ConicProgram::new();
    let pv = sym_vars(&mut prog, n);
    let (g, gam): (Option<usize>, Vec<usize>) = match mode {
        GammaMode::Tied => {
            let g = prog.var();
            (Some(g), vec![g; m])
        }
        GammaMode::Diagonal { .. } => (None, prog.vars(m)),
    };
    let tau = match mult {
        Multiplier::NormBound { .. } => Some(prog.var()),
        _ => None,
    };
    let cd = linalg::hstack(&[&sys.c, &sys.d]);
    // Multiplier contribution: τ·(cd)ᵀM₀(cd), or a constant.
    let m_lin = match tau {
        Some(_) => cd.transpose() * mult.m_matrix(ny, 1.0) * &cd,
        None => DMatrix::zeros(n + m, n + m),
    };
    let m_const = match tau {
        Some(_) => DMatrix::zeros(n + m, n + m),
        None => cd.transpose() * mult.m_matrix(ny, 0.0) * &cd,
    };
    let eps = opts.slack * (1.0 + sys.a.norm() + sys.b.norm());

    // −(decay block) − εI ⪰ 0
    let mut blk = vec![vec![Affine::default(); n + m]; n + m];
    for i in 0..n {
        for j in i..n {
            let e = &mut blk[i][j];
            e.add_term(pv[i][j], -2.0 * alpha);
            for k in 0..n {
                e.add_term(pv[k][j], -sys.a[(k, i)]);
                e.add_term(pv[i][k], -sys.a[(k, j)]);
            }
        }
        for j in 0..m {
            let e = &mut blk[i][n + j];
            for k in 0..n {
                e.add_term(pv[i][k], -sys.b[(k, j)]);
            }
        }
    }
    for i in 0..m {
        blk[n + i][n + i].add_term(gam[i], 1.0);
    }
    for i in 0..n + m {
        for j in i..n + m {
            let e = &mut blk[i][j];
            e.add_const(-m_const[(i, j)]);
            if let Some(t) = tau {
                e.add_term(t, -m_lin[(i, j)]);
            }
            if i == j {
                e.add_const(-eps);
            }
        }
    }
    prog.psd(&blk);

    let x = mult.x_matrix(n);
    let mut out = vec![vec![Affine::default(); nz + n]; nz + n];
    for i in 0..nz {
        out[i][i] = match g {
            Some(g) => Affine::var(g),
            None => Affine::constant(1.0),
        };
        for j in 0..n {
            out[i][nz + j] = Affine::constant(sys.c_z[(i, j)]);
        }
    }
    for i in 0..n {
        for j in i..n {
            let mut e = Affine::term(pv[i][j], alpha);
            e.add_const(-alpha * x[(i, j)]);
            out[nz + i][nz + j] = e;
        }
    }
    prog.psd(&out);

    let pmx: Vec<Vec<Affine>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut e = Affine::var(pv[i][j]);
                    e.add_const(-x[(i, j)]);
                    e
                })
                .collect()
        })
        .collect();
    prog.psd(&pmx);
    for &v in gam.iter().take(if g.is_some() { 1 } else { m }) {
        prog.nonneg(Affine::var(v));
    }
    if let Some(t) = tau {
        prog.nonneg(Affine::var(t));
    }
    match (mode, g) {
        (GammaMode::Tied, Some(g)) => prog.minimize(Affine::var(g)),
        (GammaMode::Diagonal { weights }, _) => {
            let mut obj = Affine::default();
            for (v, w) in gam.iter().zip(weights) {
                obj.add_term(*v, *w);
            }
            prog.minimize(obj);
        }
        _ => unreachable!("tied mode always has a γ variable"),
    }

    let sol = prog.solve(&opts.conic)?;
    match sol.status {
        ConicStatus::Optimal => {}
        ConicStatus::Infeasible => return Err(Error::Infeasible(format!("IQC LMI infeasible at α = {alpha:.4e}"))),
        other => return Err(Error::Solver(format!("SDP ended with status {other:?}"))),
    }
    let p = DMatrix::from_fn(n, n, |i, j| sol.x[pv[i][j]]);
    let gamma_weights: Vec<f64> = gam.iter().map(|&v| sol.x[v].max(0.0)).collect();
    let tau_v = tau.map(|t| sol.x[t].max(0.0));
    Ok(IqcCertificate {
        alpha,
        gamma: g.map_or(1.0, |g| sol.x[g].max(0.0)),
        p,
        gamma_weights,
        m: mult.m_matrix(ny, tau_v.unwrap_or(0.0)),
        x,
        tau: tau_v,
        residuals: Vec::new(),
    })
}

/// Best certificate over `α = λ/2` for each `λ` in `grid`: least `γ` when
/// tied, least weighted trace of `Γ` otherwise.
pub fn alpha_linesearch(
    sys: &IqcSystem,
    mult: &Multiplier,
    mode: &GammaMode,
    grid: &[f64],
    opts: &SynthesisOptions,
) -> Result<IqcCertificate> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty λ grid".into()));
    }
    let score = |c: &IqcCertificate| match mode {
        GammaMode::Tied => c.gamma,
        GammaMode::Diagonal { weights } => c.gamma_weights.iter().zip(weights).map(|(g, w)| g * w).sum(),
    };
    let mut best: Option<(f64, IqcCertificate)> = None;
    let mut last_err = None;
    for &lambda in grid {
        match iqc_peak_lmi(sys, mult, mode, lambda / 2.0, opts) {
            Ok(c) => {
                let s = score(&c);
                if best.as_ref().map_or(true, |(b, _)| s < *b) {
                    best = Some((s, c));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| {
        Error::Infeasible(format!(
            "no α in the grid admits an IQC certificate (last failure: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqcBound {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
    /// `√(αγδ)`.
    pub z_bound: Vec<f64>,
}

/// Exact propagation of `δ̇ = −2αδ + q` with `q = ‖w‖²_Γ` held between
/// samples.
pub fn simulate_iqc_bound(cert: &IqcCertificate, drive: &SampledSignal, delta0: f64) -> Result<IqcBound> {
    if !(delta0 >= 0.0 && delta0.is_finite()) {
        return Err(Error::InvalidArgument("initial δ must be non-negative".into()));
    }
    if drive.channels() != 1 {
        return Err(Error::dim("drive must be a scalar signal"));
    }
    if drive.values.iter().any(|q| *q < 0.0) {
        return Err(Error::InvalidArgument("drive ‖w‖²_Γ must be non-negative".into()));
    }
    let mut delta = Vec::with_capacity(drive.len());
    delta.push(delta0);
    for k in 1..drive.len() {
        let h = drive.times[k] - drive.times[k - 1];
        let q = drive.values[(0, k - 1)];
        delta.push(comparison_step(delta[k - 1], 2.0 * cert.alpha, 1.0, q, h));
    }
    Ok(IqcBound {
        times: drive.times.clone(),
        z_bound: delta.iter().map(|d| cert.output_bound(*d)).collect(),
        delta,
    })
}

/// Tied-Γ, trivial-multiplier IQC certificate against the peak certificate
/// at the same decay.  The raw `γ` differ by `√2` (the IQC output LMI
/// carries `αP = λP/2`), so the comparison is on the implied peak gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub lambda: f64,
    pub gamma_peak: f64,
    pub gamma_iqc: f64,
    pub implied_gain: f64,
    pub relative_gap: f64,
    pub pass: bool,
}

pub fn prop2_equivalence_check(err: &ErrorDynamics, lambda: f64, opts: &SynthesisOptions) -> Result<Prop2Report> {
    let peak = peak_gain_lmi_with(err, lambda, opts)?;
    let iqc = iqc_peak_lmi(&IqcSystem::from_error(err), &Multiplier::Trivial, &GammaMode::Tied, lambda / 2.0, opts)?;
    let implied = iqc.implied_peak_gain();
    let gap = (implied - peak.gamma).abs() / peak.gamma.abs().max(f64::MIN_POSITIVE);
    Ok(Prop2Report {
        lambda,
        gamma_peak: peak.gamma,
        gamma_iqc: iqc.gamma,
        implied_gain: implied,
        relative_gap: gap,
        pass: gap <= 1e-2,
    })
}
