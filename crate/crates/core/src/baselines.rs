//! Comparison bounds on the ROM prediction error: uniform polytopic
//! reachability, a fixed Lyapunov error-bounding system, and the peak and
//! filtered-peak tubes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounding::{simulate_bound, RobustPredictor};
use crate::error::{Error, Result};
use crate::linalg::{max_eig_sym, solve_lyapunov, symmetrize};
use crate::lti::{simulate, spectral_abscissa, zoh_discretize, LtiSystem, SampledSignal};
use crate::reduction::{ErrorDynamics, ReducedModel};
use crate::synthesis::{check_lmi, CertificateKind, GainCertificate, PeakLmiData};

/// Per-coordinate interval `center ± radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
}

impl IntervalBox {
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("box bounds"));
        }
        if lo.iter().chain(hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box must be bounded".into()));
        }
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("empty box".into()));
        }
        Ok(Self {
            center: lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            radius: lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect(),
        })
    }

    pub fn lo(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c - r).collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c + r).collect()
    }
}

/// Hyperbox containing `x_r(t_k)` for every `k ≥ 0` and every input sequence
/// in the box.  The first `N` steps are exact; the contribution of inputs
/// older than `N` steps is covered by a geometric tail bound.
pub fn reduced_state_box(rom: &ReducedModel, input_lo: &[f64], input_hi: &[f64], dt: f64, n: usize) -> Result<IntervalBox> {
    let ubox = IntervalBox::from_bounds(input_lo, input_hi)?;
    if ubox.center.len() != rom.b_r.ncols() {
        return Err(Error::dim("input box does not match B_r"));
    }
    let a = spectral_abscissa(&rom.a_r)?;
    if a >= 0.0 {
        return Err(Error::NotHurwitz { abscissa: a });
    }
    let (ad, bd) = zoh_discretize(&rom.a_r, &rom.b_r, dt)?;
    let nr = rom.order();
    let rho = DVector::from_column_slice(&ubox.radius);
    let uc = DVector::from_column_slice(&ubox.center);

    let mut lo = rom.x_r0.clone();
    let mut hi = rom.x_r0.clone();
    // nominal (center) trajectory and the accumulated absolute sums
    let mut nominal = rom.x_r0.clone();
    let mut abs_sum = DVector::zeros(nr);
    let mut impulse = bd.clone();
    // Σ_i Σ_l max_row |(A^i B)_{·l}| ρ_l, used by the tail bound
    let mut col_peak_sum = 0.0;
    for _ in 0..n {
        nominal = &ad * nominal + &bd * &uc;
        abs_sum += impulse.abs() * &rho;
        for l in 0..impulse.ncols() {
            col_peak_sum += impulse.column(l).amax() * rho[l];
        }
        impulse = &ad * impulse;
        for i in 0..nr {
            lo[i] = lo[i].min(nominal[i] - abs_sum[i]);
            hi[i] = hi[i].max(nominal[i] + abs_sum[i]);
        }
    }
    // ‖A^N‖_∞ < 1 lets the input sum beyond N be bounded geometrically.
    let an = ad.pow(n as u32);
    let q = an.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let tail = if n == 0 {
        0.0
    } else if q < 1.0 {
        q / (1.0 - q) * col_peak_sum
    } else {
        return Err(Error::Numerical(format!(
            "‖A_d^N‖_∞ = {q:.3} ≥ 1; lengthen the horizon to bound the tail"
        )));
    };
    Ok(IntervalBox {
        center: (0..nr).map(|i| 0.5 * (lo[i] + hi[i])).collect(),
        radius: (0..nr).map(|i| 0.5 * (hi[i] - lo[i]) + tail).collect(),
    })
}

/// Worst-case `‖z_e(t_k)‖` for `k = 0..=N` over all `r = [w; x_r; u]` in the
/// product box (discrete time, ZOH).  Each output coordinate is maximized
/// exactly; the coordinates are then combined in the Euclidean norm.
pub fn uniform_error_bound(
    err: &ErrorDynamics,
    x_box: &IntervalBox,
    input_lo: &[f64],
    input_hi: &[f64],
    w_bar: f64,
    dt: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let ubox = IntervalBox::from_bounds(input_lo, input_hi)?;
    if x_box.center.len() != err.n_r || ubox.center.len() != err.n_u {
        return Err(Error::dim("boxes do not match the error dynamics"));
    }
    if !(w_bar >= 0.0) {
        return Err(Error::InvalidArgument("w_bar must be non-negative".into()));
    }
    let mut center = vec![0.0; err.n_w];
    let mut radius = vec![w_bar; err.n_w];
    center.extend(&x_box.center);
    radius.extend(&x_box.radius);
    center.extend(&ubox.center);
    radius.extend(&ubox.radius);
    let (rc, rr) = (DVector::from_vec(center), DVector::from_vec(radius));

    let (ad, bd) = zoh_discretize(&err.a, &err.b_e, dt)?;
    let nz = err.c.nrows();
    let mut out = Vec::with_capacity(n + 1);
    // rows of C A_d^i, advanced one step at a time
    let mut ca = err.c.clone();
    let mut free = DVector::zeros(nz);
    let mut abs_sum = DVector::<f64>::zeros(nz);
    let mut e_k = err.e0.clone();
    out.push((&err.c * &e_k).norm());
    for _ in 0..n {
        let cb = &ca * &bd;
        free += &cb * &rc;
        abs_sum += cb.abs() * &rr;
        ca = &ca * &ad;
        e_k = &ad * e_k;
        let homog = &err.c * &e_k;
        let worst = DVector::from_fn(nz, |j, _| (homog[j] + free[j]).abs() + abs_sum[j]);
        out.push(worst.norm());
    }
    Ok(out)
}

/// Lyapunov-based error-bounding system: `P_L` from the shifted Lyapunov
/// equation and the smallest `γ_L` for which the peak blocks hold with
/// `P = P_L` fixed.
pub fn lyapunov_error_bound(err: &ErrorDynamics, lambda_l: f64) -> Result<GainCertificate> {
    let alpha = spectral_abscissa(&err.a)?;
    if alpha >= 0.0 {
        return Err(Error::NotHurwitz { abscissa: alpha });
    }
    if !(lambda_l > 0.0 && lambda_l < -2.0 * alpha) {
        return Err(Error::InvalidArgument(format!(
            "λ_L = {lambda_l:.4e} must lie in (0, {:.4e})",
            -2.0 * alpha
        )));
    }
    let n = err.a.nrows();
    let shifted = &err.a + DMatrix::identity(n, n) * (lambda_l / 2.0);
    // Aₛᵀ P + P Aₛ + I = 0
    let p = symmetrize(&solve_lyapunov(&shifted.transpose(), &DMatrix::identity(n, n))?);
    // decay block: [−I, PB; BᵀP, −γI] ⪯ 0 ⇔ γ ≥ λ_max(BᵀP²B)
    let pb = &p * &err.b_e;
    let g_decay = max_eig_sym(&(pb.transpose() * &pb));
    // output block: λP ⪰ CᵀC/γ ⇔ γ ≥ λ_max(C P⁻¹ Cᵀ)/λ
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Lyapunov solution is not positive definite".into()))?;
    let pinv_ct = chol.solve(&err.c.transpose());
    let g_out = max_eig_sym(&symmetrize(&(&err.c * pinv_ct))) / lambda_l;
    let gamma = g_decay.max(g_out).max(1e-12) * (1.0 + 1e-10);
    let report = check_lmi(&PeakLmiData::from_error(err), &p, lambda_l, gamma);
    Ok(GainCertificate {
        kind: CertificateKind::Peak,
        lambda: lambda_l,
        gamma,
        p,
        residuals: report.blocks,
        grid_profile: Vec::new(),
        gamma_weights: None,
        x_mult: None,
    })
}

/// `0.99 · 2|α(A)|`.
pub fn default_lyapunov_rate(err: &ErrorDynamics) -> Result<f64> {
    Ok(0.99 * 2.0 * spectral_abscissa(&err.a)?.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uniform,
    #[serde(rename = "inputdep")]
    InputDependent,
    Peak,
    #[serde(rename = "peakfilter")]
    PeakFilter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Uniform, Method::InputDependent, Method::Peak, Method::PeakFilter];

    pub fn column(self) -> &'static str {
        match self {
            Method::Uniform => "bound_uniform",
            Method::InputDependent => "bound_inputdep",
            Method::Peak => "bound_peak",
            Method::PeakFilter => "bound_peakfilter",
        }
    }
}

/// Everything needed to evaluate the four bounds on one input trajectory.
pub struct ComparisonInputs<'a> {
    pub sys: &'a LtiSystem,
    pub err: &'a ErrorDynamics,
    pub rom: &'a ReducedModel,
    pub peak_filter: Option<&'a RobustPredictor>,
    pub peak: Option<&'a RobustPredictor>,
    pub input_dependent: Option<&'a RobustPredictor>,
    pub input_lo: &'a [f64],
    pub input_hi: &'a [f64],
    pub w_bar: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodBound {
    pub method: Method,
    /// `None` when the method could not be evaluated; see `status`.
    pub values: Option<Vec<f64>>,
    pub status: String,
}

impl MethodBound {
    pub fn peak(&self) -> Option<f64> {
        self.values.as_ref().map(|v| v.iter().cloned().fold(0.0, f64::max))
    }

    pub fn terminal(&self) -> Option<f64> {
        self.values.as_ref().and_then(|v| v.last().copied())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundComparison {
    pub times: Vec<f64>,
    pub methods: Vec<MethodBound>,
    /// `‖z(t_k) − z_r(t_k)‖` from the full-order model (`w ≡ 0`).
    pub true_error: Vec<f64>,
}

impl BoundComparison {
    pub fn get(&self, m: Method) -> Option<&[f64]> {
        self.methods.iter().find(|b| b.method == m).and_then(|b| b.values.as_deref())
    }

    /// Peak of `num` over peak of `den`.
    pub fn peak_ratio(&self, num: Method, den: Method) -> Option<f64> {
        let peak = |m| self.methods.iter().find(|b| b.method == m).and_then(MethodBound::peak);
        Some(peak(num)? / peak(den)?)
    }

    pub fn to_csv_rows(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut header = vec!["t".to_string()];
        header.extend(self.methods.iter().map(|b| b.method.column().to_string()));
        let rows = (0..self.times.len())
            .map(|k| {
                let mut r = vec![self.times[k]];
                r.extend(self.methods.iter().map(|b| b.values.as_ref().map_or(f64::NAN, |v| v[k])));
                r
            })
            .collect();
        (header, rows)
    }

    pub fn summary(&self) -> serde_json::Value {
        let methods: serde_json::Map<String, serde_json::Value> = self
            .methods
            .iter()
            .map(|b| {
                (
                    b.method.column().trim_start_matches("bound_").to_string(),
                    serde_json::json!({"peak": b.peak(), "terminal": b.terminal(), "status": b.status}),
                )
            })
            .collect();
        serde_json::json!({
            "methods": methods,
            "true_error_peak": self.true_error.iter().cloned().fold(0.0, f64::max),
            "ratio_uniform_over_peakfilter": self.peak_ratio(Method::Uniform, Method::PeakFilter),
            "ratio_inputdep_over_peakfilter": self.peak_ratio(Method::InputDependent, Method::PeakFilter),
            "ratio_peak_over_peakfilter": self.peak_ratio(Method::Peak, Method::PeakFilter),
        })
    }
}

/// Evaluates the selected bounds on the control grid of `u`.
pub fn compare_bounds(inputs: &ComparisonInputs<'_>, u: &SampledSignal, methods: &[Method]) -> Result<BoundComparison> {
    let dt = inputs.dt;
    let steps = u.len();
    let full = simulate(inputs.sys, u, None, dt)?;
    let rom_sys = inputs.rom.as_system()?;
    let nominal = simulate(&rom_sys, u, None, dt)?;
    let true_error = (0..=steps)
        .map(|k| (full.z.values.column(k) - nominal.z.values.column(k)).norm())
        .collect();
    let tube = |p: Option<&RobustPredictor>| -> Result<Vec<f64>> {
        let p = p.ok_or_else(|| Error::MissingArtifact("no certificate for this method".into()))?;
        Ok(simulate_bound(p, u, dt)?.delta_z)
    };
    let mut out = Vec::new();
    for &m in Method::ALL.iter().filter(|m| methods.contains(m)) {
        let values = match m {
            Method::Uniform => reduced_state_box(inputs.rom, inputs.input_lo, inputs.input_hi, dt, steps).and_then(|b| {
                uniform_error_bound(inputs.err, &b, inputs.input_lo, inputs.input_hi, inputs.w_bar, dt, steps)
            }),
            Method::InputDependent => tube(inputs.input_dependent),
            Method::Peak => tube(inputs.peak),
            Method::PeakFilter => tube(inputs.peak_filter),
        };
        out.push(match values {
            Ok(v) => MethodBound { method: m, values: Some(v), status: "ok".into() },
            Err(e) => MethodBound { method: m, values: None, status: e.to_string() },
        });
    }
    Ok(BoundComparison { times: full.z.times.clone(), methods: out, true_error })
}

/// Largest violation of `bound ≥ true error` over the grid (negative when
/// the bound holds with margin).
pub fn soundness_margin(bound: &[f64], true_error: &[f64]) -> f64 {
    bound.iter().zip(true_error).map(|(b, e)| e - b).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_err() -> ErrorDynamics {
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

    #[test]
    fn scalar_lyapunov_bound() {
        let cert = lyapunov_error_bound(&scalar_err(), 1.98).unwrap();
        assert!((cert.p[(0, 0)] - 50.0).abs() < 1e-9);
        assert!((cert.gamma / 2500.0 - 1.0).abs() < 1e-8);
        assert!(cert.passes());
        assert!(lyapunov_error_bound(&scalar_err(), 2.0).is_err());
    }

    #[test]
    fn single_step_uniform_bound() {
        let err = scalar_err();
        let x_box = IntervalBox { center: vec![], radius: vec![] };
        let b = uniform_error_bound(&err, &x_box, &[-2.0], &[2.0], 0.0, 0.5, 1).unwrap();
        let bd = 1.0 - (-0.5f64).exp();
        assert_eq!(b[0], 0.0);
        assert!((b[1] - 2.0 * bd).abs() < 1e-14);
    }
}
