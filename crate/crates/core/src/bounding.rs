//! Input filters, the scalar error-bounding systems and the implementable
//! robust predictor with its output tube radius `δ_z`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, block2};
use crate::lti::{refinement, simulate, zoh_discretize, LtiSystem, SampledSignal};
use crate::reduction::{ErrorDynamics, ReducedModel};
use crate::synthesis::{
    filtered_peak_gain_lmi_with, AugmentedErrorSystem, CertificateKind, GainCertificate, SynthesisOptions,
};

/// Linear filter `ψ̇ = A_ψ ψ + B_ψ r`, `r_ψ = C_ψ ψ + D_ψ r` on the lumped
/// input `r = [w; x_r; u]`.  The first `n_w` outputs repeat `w`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundingFilter {
    #[serde(with = "crate::serde_mat")]
    pub a_psi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b_psi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c_psi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub d_psi: DMatrix<f64>,
    pub omega_c: f64,
    pub scales: Vec<f64>,
    pub n_w: usize,
}

impl BoundingFilter {
    pub fn n_states(&self) -> usize {
        self.a_psi.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_psi.ncols()
    }

    /// `r_ψ = r`.
    pub fn identity(n_w: usize, n_r: usize, n_u: usize) -> Self {
        let m = n_w + n_r + n_u;
        Self {
            a_psi: DMatrix::zeros(0, 0),
            b_psi: DMatrix::zeros(0, m),
            c_psi: DMatrix::zeros(m, 0),
            d_psi: DMatrix::identity(m, m),
            omega_c: f64::INFINITY,
            scales: vec![1.0; n_r + n_u],
            n_w,
        }
    }

    /// Checks the disturbance pass-through structure: no `w` into the filter
    /// state, the top rows return `w`, and the remaining rows do not see `w`.
    pub fn validate(&self) -> Result<()> {
        let (np, m, nw) = (self.n_states(), self.n_inputs(), self.n_w);
        if !self.a_psi.is_square()
            || self.b_psi.nrows() != np
            || self.c_psi.ncols() != np
            || self.d_psi.shape() != (self.c_psi.nrows(), m)
            || self.c_psi.nrows() < nw
            || m < nw
        {
            return Err(Error::dim("filter matrices"));
        }
        let top_ok = self.c_psi.rows(0, nw).norm() == 0.0
            && (self.d_psi.view((0, 0), (nw, nw)) - DMatrix::<f64>::identity(nw, nw)).norm() == 0.0
            && self.d_psi.view((0, nw), (nw, m - nw)).norm() == 0.0;
        let rest = self.c_psi.nrows() - nw;
        if self.b_psi.columns(0, nw).norm() != 0.0
            || !top_ok
            || self.d_psi.view((nw, 0), (rest, nw)).norm() != 0.0
        {
            return Err(Error::InvalidArgument("filter violates the disturbance pass-through structure".into()));
        }
        if np > 0 && crate::lti::spectral_abscissa(&self.a_psi)? >= 0.0 {
            return Err(Error::InvalidArgument("filter dynamics must be Hurwitz".into()));
        }
        Ok(())
    }
}

/// First-order high-pass per non-disturbance channel:
/// `ṗ_i = −ω_c p_i + ω_c v_i`, output `(v_i − p_i)/s_i`; disturbances pass
/// through unchanged.
pub fn build_highpass_filter(rom: &ReducedModel, omega_c: f64, scales: &[f64], n_w: usize) -> Result<BoundingFilter> {
    let np = rom.order() + rom.b_r.ncols();
    if scales.len() != np {
        return Err(Error::dim(format!("{} scales for {np} channels", scales.len())));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("filter scales must be positive".into()));
    }
    let inv = DMatrix::from_diagonal(&DVector::from_iterator(np, scales.iter().map(|s| 1.0 / s)));
    let mut f = build_highpass_filter_mixed(rom, omega_c, &inv, n_w)?;
    f.scales = scales.to_vec();
    Ok(f)
}

/// Same high-pass states with a full output normalization:
/// `r_ψ = N (v − p)` for an invertible `N`.  `scales` is left empty.
pub fn build_highpass_filter_mixed(
    rom: &ReducedModel,
    omega_c: f64,
    normalization: &DMatrix<f64>,
    n_w: usize,
) -> Result<BoundingFilter> {
    let np = rom.order() + rom.b_r.ncols();
    if !(omega_c > 0.0 && omega_c.is_finite()) {
        return Err(Error::InvalidArgument("cutoff must be positive".into()));
    }
    if normalization.shape() != (np, np) {
        return Err(Error::dim("normalization must be square over the x_r and u channels"));
    }
    if !linalg::all_finite(normalization) || normalization.clone().try_inverse().is_none() {
        return Err(Error::InvalidArgument("normalization must be finite and invertible".into()));
    }
    let m = n_w + np;
    let mut b_psi = DMatrix::zeros(np, m);
    b_psi.view_mut((0, n_w), (np, np)).fill_diagonal(omega_c);
    let c_psi = linalg::vstack(&[&DMatrix::zeros(n_w, np), &(-normalization)]);
    let mut d_psi = DMatrix::zeros(n_w + np, m);
    d_psi.view_mut((0, 0), (n_w, n_w)).fill_diagonal(1.0);
    d_psi.view_mut((n_w, n_w), (np, np)).copy_from(normalization);
    let f = BoundingFilter {
        a_psi: DMatrix::from_diagonal_element(np, np, -omega_c),
        b_psi,
        c_psi,
        d_psi,
        omega_c,
        scales: Vec::new(),
        n_w,
    };
    f.validate()?;
    Ok(f)
}

pub fn build_augmented_system(err: &ErrorDynamics, filter: &BoundingFilter) -> Result<AugmentedErrorSystem> {
    if filter.n_inputs() != err.n_lumped() || filter.n_w != err.n_w {
        return Err(Error::dim("filter input does not match the lumped error input"));
    }
    AugmentedErrorSystem::from_blocks(err, &filter.a_psi, &filter.b_psi, &filter.c_psi, &filter.d_psi)
}

/// Exact step of `δ̇ = −rate·δ + gain·drive` over `h` with constant drive.
pub fn comparison_step(delta: f64, rate: f64, gain: f64, drive: f64, h: f64) -> f64 {
    let decay = (-rate * h).exp();
    let integral = if rate * h < 1e-12 { h } else { -(-rate * h).exp_m1() / rate };
    decay * delta + integral * gain * drive
}

/// Propagates the comparison ODE over consecutive intervals of length `h`.
pub fn comparison_trajectory(delta0: f64, rate: f64, gain: f64, drives: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(drives.len() + 1);
    let mut d = delta0;
    out.push(d);
    for &q in drives {
        d = comparison_step(d, rate, gain, q, h);
        out.push(d);
    }
    out
}

fn joint_dynamics(rom: &ReducedModel, filter: &BoundingFilter) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nr, nu, nw) = (rom.order(), rom.b_r.ncols(), filter.n_w);
    let np = filter.n_states();
    let bx = filter.b_psi.columns(nw, nr).into_owned();
    let bu = filter.b_psi.columns(nw + nr, nu).into_owned();
    let a = block2(&rom.a_r, &DMatrix::zeros(nr, np), &bx, &filter.a_psi);
    let b = linalg::vstack(&[&rom.b_r, &bu]);
    (a, b)
}

fn drive_map(rom: &ReducedModel, filter: &BoundingFilter) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nr, nu, nw) = (rom.order(), rom.b_r.ncols(), filter.n_w);
    let dx = filter.d_psi.columns(nw, nr).into_owned();
    let du = filter.d_psi.columns(nw + nr, nu).into_owned();
    (linalg::hstack(&[&dx, &filter.c_psi]), du)
}

/// Reduced model, filter and certificate needed to predict a guaranteed
/// tube around `z_r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustPredictor {
    pub rom: ReducedModel,
    pub filter: BoundingFilter,
    pub cert: GainCertificate,
    pub w_bar: f64,
    pub delta0: f64,
}

impl RobustPredictor {
    /// `δ̄(0) = ‖[(I − VWᵀ)x0; 0]‖²_P`.  A plain peak certificate is accepted
    /// together with the identity filter.
    pub fn new(
        rom: ReducedModel,
        filter: BoundingFilter,
        cert: GainCertificate,
        w_bar: f64,
        x0: &DVector<f64>,
    ) -> Result<Self> {
        filter.validate()?;
        let n = rom.v.nrows();
        let np = filter.n_states();
        match cert.kind {
            CertificateKind::FilteredPeak => {}
            CertificateKind::Peak if np == 0 => {}
            _ => return Err(Error::InvalidArgument("predictor needs a filtered-peak certificate".into())),
        }
        if cert.p.nrows() != n + np || x0.len() != n {
            return Err(Error::dim("certificate does not match reduced model and filter"));
        }
        if !(w_bar >= 0.0) {
            return Err(Error::InvalidArgument("w_bar must be non-negative".into()));
        }
        let mut chi0 = DVector::zeros(n + np);
        chi0.rows_mut(0, n).copy_from(&(rom.residual_projector() * x0));
        let delta0 = cert.weighted_norm_sq(&chi0).max(0.0);
        Ok(Self { rom, filter, cert, w_bar, delta0 })
    }

    pub fn n_joint(&self) -> usize {
        self.rom.order() + self.filter.n_states()
    }

    /// `c = γλ`, so that `δ_z = √(c δ̄)`.
    pub fn radius_gain(&self) -> f64 {
        self.cert.gamma * self.cert.lambda
    }

    /// Joint dynamics of `q = [x_r; ψ̄]` driven by `u` (disturbance slot zero).
    pub fn joint_dynamics(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        joint_dynamics(&self.rom, &self.filter)
    }

    /// Maps `(q, u)` to the filtered nominal input `r̄_ψ` (disturbance rows
    /// zero): `r̄_ψ = F q + G u`.
    pub fn drive_map(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        drive_map(&self.rom, &self.filter)
    }

    pub fn initial_joint_state(&self) -> DVector<f64> {
        let mut q = DVector::zeros(self.n_joint());
        q.rows_mut(0, self.rom.order()).copy_from(&self.rom.x_r0);
        q
    }
}

/// Predicted nominal trajectory and tube.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundTrajectory {
    pub times: Vec<f64>,
    #[serde(with = "crate::serde_mat")]
    pub x_r: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub psi: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub z_r: DMatrix<f64>,
    pub delta_chi: Vec<f64>,
    pub delta_z: Vec<f64>,
    /// Drive bound `max(‖r̄_ψ‖² at both ends) + w̄²` per refined interval.
    pub drive: Vec<f64>,
}

impl BoundTrajectory {
    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let nz = self.z_r.nrows();
        let mut header = vec!["t".to_string()];
        header.extend((0..nz).map(|i| if nz == 1 { "z_r".to_string() } else { format!("z_r_{i}") }));
        header.push("delta_z".into());
        header.push("delta_chi".into());
        let rows = (0..self.times.len())
            .map(|k| {
                let mut r = vec![self.times[k]];
                r.extend(self.z_r.column(k).iter());
                r.push(self.delta_z[k]);
                r.push(self.delta_chi[k]);
                r
            })
            .collect();
        (header, rows)
    }
}

/// Propagates the robust predictor under `u` on a grid refined to `dt_out`.
pub fn simulate_bound(pred: &RobustPredictor, u: &SampledSignal, dt_out: f64) -> Result<BoundTrajectory> {
    let (nr, nu) = (pred.rom.order(), pred.rom.b_r.ncols());
    if u.channels() != nu {
        return Err(Error::dim("input channels"));
    }
    let h = u.uniform_spacing()?.unwrap_or(dt_out);
    let m = refinement(h, dt_out)?;
    let step = h / m as f64;
    let (a, b) = pred.joint_dynamics();
    let (ad, bd) = zoh_discretize(&a, &b, step)?;
    let (f, g) = pred.drive_map();
    let (lambda, gamma) = (pred.cert.lambda, pred.cert.gamma);
    let w2 = pred.w_bar * pred.w_bar;

    let total = u.len() * m;
    let nq = pred.n_joint();
    let mut qs = DMatrix::zeros(nq, total + 1);
    let mut q = pred.initial_joint_state();
    qs.set_column(0, &q);
    let mut delta = vec![pred.delta0];
    let mut drive = Vec::with_capacity(total);
    for k in 0..u.len() {
        let uk = u.sample(k);
        let forced = &bd * &uk;
        let gu = &g * &uk;
        for _ in 0..m {
            let left = (&f * &q + &gu).norm_squared();
            q = &ad * &q + &forced;
            let right = (&f * &q + &gu).norm_squared();
            let d = left.max(right) + w2;
            drive.push(d);
            let next = comparison_step(*delta.last().unwrap(), lambda, gamma, d, step);
            assert!(next >= 0.0, "comparison state turned negative");
            delta.push(next);
            qs.set_column(delta.len() - 1, &q);
        }
    }
    let x_r = qs.rows(0, nr).into_owned();
    let psi = qs.rows(nr, nq - nr).into_owned();
    let c = lambda * gamma;
    Ok(BoundTrajectory {
        times: (0..=total).map(|j| u.times[0] + j as f64 * step).collect(),
        z_r: &pred.rom.c_r * &x_r,
        delta_z: delta.iter().map(|d| (c * d).sqrt()).collect(),
        x_r,
        psi,
        delta_chi: delta,
        drive,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContainmentReport {
    /// `max_t (‖z − z_r‖ − δ_z)`.
    pub max_margin: f64,
    pub peak_error: f64,
    pub peak_delta_z: f64,
    pub pass: bool,
}

/// Simulates plant and predictor under the same `u` (and a disturbance with
/// `‖w‖ ≤ w̄`) and compares `‖z − z_r‖` against `δ_z`.
pub fn containment_check(
    sys: &LtiSystem,
    pred: &RobustPredictor,
    u: &SampledSignal,
    w: Option<&SampledSignal>,
    dt_out: f64,
) -> Result<ContainmentReport> {
    if let Some(w) = w {
        if w.values.column_iter().any(|c| c.norm() > pred.w_bar * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument("disturbance exceeds w_bar".into()));
        }
    }
    let full = simulate(sys, u, w, dt_out)?;
    let tube = simulate_bound(pred, u, dt_out)?;
    let mut max_margin = f64::NEG_INFINITY;
    let mut peak_error: f64 = 0.0;
    for k in 0..tube.times.len() {
        let err = (full.z.values.column(k) - tube.z_r.column(k)).norm();
        peak_error = peak_error.max(err);
        max_margin = max_margin.max(err - tube.delta_z[k]);
    }
    let peak_delta_z = tube.delta_z.iter().cloned().fold(0.0, f64::max);
    Ok(ContainmentReport {
        max_margin,
        peak_error,
        peak_delta_z,
        pass: max_margin <= 1e-6 * (1.0 + peak_delta_z),
    })
}

/// Random admissible experiment: piecewise-constant inputs uniform in the box
/// and disturbances of norm `w̄` with random direction.
pub fn random_admissible_signals(
    rng: &mut ChaCha8Rng,
    lo: &[f64],
    hi: &[f64],
    n_w: usize,
    w_bar: f64,
    steps: usize,
    dt: f64,
) -> Result<(SampledSignal, Option<SampledSignal>)> {
    let nu = lo.len();
    let u = DMatrix::from_fn(nu, steps, |i, _| rng.gen_range(lo[i]..=hi[i]));
    let u = SampledSignal::uniform(0.0, dt, u)?;
    let w = if n_w > 0 {
        let mut vals = DMatrix::from_fn(n_w, steps, |_, _| rng.gen_range(-1.0..=1.0));
        for mut c in vals.column_iter_mut() {
            let nrm = c.norm();
            if nrm > 0.0 {
                c *= w_bar / nrm;
            }
        }
        Some(SampledSignal::uniform(0.0, dt, vals)?)
    } else {
        None
    };
    Ok((u, w))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub samples: usize,
    pub passed: usize,
    pub worst_margin: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_containment(
    sys: &LtiSystem,
    pred: &RobustPredictor,
    lo: &[f64],
    hi: &[f64],
    steps: usize,
    dt: f64,
    dt_out: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let (u, w) = random_admissible_signals(&mut rng, lo, hi, sys.n_disturbances(), pred.w_bar, steps, dt)?;
        let rep = containment_check(sys, pred, &u, w.as_ref(), dt_out)?;
        worst = worst.max(rep.max_margin);
        if rep.pass {
            passed += 1;
        }
    }
    Ok(MonteCarloSummary { samples, passed, worst_margin: worst })
}

/// Gram matrix `Q` of the filtered gain over the normalization:
/// `γ²λ = ⟨Q, N⟩` for `r_ψ = M(v − p)`, `N = M⁻¹M⁻ᵀ`, at fixed `λ`.
/// Recovered by polarization around `N = I`.
pub fn filter_gain_gram(
    err: &ErrorDynamics,
    rom: &ReducedModel,
    omega_c: f64,
    n_w: usize,
    lambda: f64,
    opts: &SynthesisOptions,
) -> Result<DMatrix<f64>> {
    let np = rom.order() + rom.b_r.ncols();
    let k2 = |n: &DMatrix<f64>| -> Result<f64> {
        let m = linalg::sym_pow(n, -0.5)?;
        let f = build_highpass_filter_mixed(rom, omega_c, &m, n_w)?;
        let aug = build_augmented_system(err, &f)?;
        let c = filtered_peak_gain_lmi_with(&aug, lambda, opts)?;
        Ok(c.gamma * c.gamma * c.lambda)
    };
    let eye = DMatrix::<f64>::identity(np, np);
    let base = k2(&eye)?;
    let mut q = DMatrix::zeros(np, np);
    for i in 0..np {
        let mut n = eye.clone();
        n[(i, i)] += 1.0;
        q[(i, i)] = k2(&n)? - base;
    }
    for i in 0..np {
        for j in i + 1..np {
            let mut n = eye.clone();
            n[(i, i)] += 1.0;
            n[(j, j)] += 1.0;
            n[(i, j)] += 1.0;
            n[(j, i)] += 1.0;
            let v = 0.5 * (k2(&n)? - base - q[(i, i)] - q[(j, j)]);
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    Ok(q)
}

/// Energy Gram `H = ∫ h hᵀ dt` of the high-passed nominal channels
/// `h = [x_r; u] − p` along the reduced trajectory driven by `u`.
pub fn highpass_energy_gram(rom: &ReducedModel, omega_c: f64, u: &SampledSignal, dt_out: f64) -> Result<DMatrix<f64>> {
    let np = rom.order() + rom.b_r.ncols();
    if u.channels() != rom.b_r.ncols() {
        return Err(Error::dim("input channels"));
    }
    let f = build_highpass_filter(rom, omega_c, &vec![1.0; np], 0)?;
    let h = u.uniform_spacing()?.unwrap_or(dt_out);
    let m = refinement(h, dt_out)?;
    let step = h / m as f64;
    let (a, b) = joint_dynamics(rom, &f);
    let (ad, bd) = zoh_discretize(&a, &b, step)?;
    let (fm, gm) = drive_map(rom, &f);
    let mut q = DVector::zeros(rom.order() + np);
    q.rows_mut(0, rom.order()).copy_from(&rom.x_r0);
    let mut gram = DMatrix::zeros(np, np);
    for k in 0..u.len() {
        let uk = u.sample(k);
        let forced = &bd * &uk;
        let gu = &gm * &uk;
        for _ in 0..m {
            let left = &fm * &q + &gu;
            q = &ad * &q + &forced;
            let right = &fm * &q + &gu;
            gram += (&left * left.transpose() + &right * right.transpose()) * (0.5 * step);
        }
    }
    Ok(gram)
}

/// Normalization `M` minimizing `⟨Q, N⟩·⟨N⁻¹, H⟩` (gain times filtered
/// energy): `N = Q^{-½}(Q^{½} H Q^{½})^{½} Q^{-½}`, `M = N^{-½}`.  Both
/// Grams get a relative ridge so that directions the gain ignores stay
/// bounded.  The result is rescaled to unit spectral norm.
pub fn optimal_normalization(q: &DMatrix<f64>, h: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if q.shape() != h.shape() || !q.is_square() {
        return Err(Error::dim("gain and energy Grams must be square and equal in size"));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument("ridge must be positive".into()));
    }
    let n = q.nrows();
    let reg = |m: &DMatrix<f64>| {
        let s = linalg::symmetrize(m);
        let scale = s.norm().max(f64::MIN_POSITIVE);
        s + DMatrix::identity(n, n) * (ridge * scale)
    };
    let (q, h) = (reg(q), reg(h));
    let qh = linalg::sym_pow(&q, 0.5)?;
    let qi = linalg::sym_pow(&q, -0.5)?;
    let mid = linalg::sym_pow(&linalg::symmetrize(&(&qh * &h * &qh)), 0.5)?;
    let m = linalg::sym_pow(&linalg::symmetrize(&(&qi * mid * &qi)), -0.5)?;
    let top = linalg::max_eig_sym(&m);
    Ok(m / top)
}
