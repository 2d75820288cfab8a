//! Dense continuous-time LTI models, exact zero-order-hold discretization and
//! trajectory simulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, all_finite};

/// Plant `ẋ = A x + B u + E w`, `z = C x`, `x(0) = x0`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LtiSystem {
    #[serde(with = "crate::serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub e: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub x0: DVector<f64>,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        e: DMatrix<f64>,
        c: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::dim("A must be square"));
        }
        if b.nrows() != n || e.nrows() != n || c.ncols() != n || x0.len() != n {
            return Err(Error::dim(format!(
                "A is {n}x{n} but B is {:?}, E is {:?}, C is {:?}, x0 has {}",
                b.shape(),
                e.shape(),
                c.shape(),
                x0.len()
            )));
        }
        for (m, name) in [(&a, "A"), (&b, "B"), (&e, "E"), (&c, "C")] {
            if !all_finite(m) {
                return Err(Error::NonFinite(name));
            }
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("x0"));
        }
        Ok(Self { a, b, e, c, x0 })
    }

    /// System without a disturbance channel and with zero initial state.
    pub fn without_disturbance(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, b, DMatrix::zeros(n, 0), c, DVector::zeros(n))
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_disturbances(&self) -> usize {
        self.e.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Checks the open-loop stability assumption.
    pub fn require_hurwitz(&self) -> Result<f64> {
        let abscissa = spectral_abscissa(&self.a)?;
        if abscissa < 0.0 {
            Ok(abscissa)
        } else {
            Err(Error::NotHurwitz { abscissa })
        }
    }
}

/// Affine output constraint `aᵀ z + b ≤ 0`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AffineConstraint {
    pub a: Vec<f64>,
    pub b: f64,
}

impl AffineConstraint {
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.a.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() + self.b
    }

    /// Exact Lipschitz constant of an affine map w.r.t. the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        self.a.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Constraint sets, weights and reference of the finite-horizon problem.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProblemData {
    pub w_bar: f64,
    pub constraints: Vec<AffineConstraint>,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    pub horizon: f64,
    pub input_weight: f64,
    pub reference: SampledSignal,
}

impl ProblemData {
    pub fn validate(&self, n_z: usize, n_u: usize) -> Result<()> {
        if !(self.w_bar >= 0.0) {
            return Err(Error::InvalidArgument("w_bar must be non-negative".into()));
        }
        if !(self.input_weight > 0.0) {
            return Err(Error::InvalidArgument("input weight R must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon T must be positive".into()));
        }
        if self.input_lo.len() != n_u || self.input_hi.len() != n_u {
            return Err(Error::dim("input box does not match the input dimension"));
        }
        if self.input_lo.iter().zip(&self.input_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidArgument("empty input box".into()));
        }
        if self.constraints.iter().any(|g| g.a.len() != n_z) {
            return Err(Error::dim("constraint gradient does not match the output dimension"));
        }
        if self.reference.values.nrows() != n_z {
            return Err(Error::dim("reference does not match the output dimension"));
        }
        Ok(())
    }
}

/// Zero-order-hold signal: column `k` of `values` holds on `[times[k], times[k+1])`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampledSignal {
    pub times: Vec<f64>,
    #[serde(with = "crate::serde_mat")]
    pub values: DMatrix<f64>,
}

impl SampledSignal {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidArgument("signal needs at least one sample".into()));
        }
        if values.ncols() != times.len() {
            return Err(Error::dim(format!(
                "{} sample times but {} value columns",
                times.len(),
                values.ncols()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("sample times must be strictly increasing".into()));
        }
        if !times.iter().all(|t| t.is_finite()) || !all_finite(&values) {
            return Err(Error::NonFinite("signal"));
        }
        Ok(Self { times, values })
    }

    /// Samples at `t0 + k dt`, one column per sample.
    pub fn uniform(t0: f64, dt: f64, values: DMatrix<f64>) -> Result<Self> {
        let times = (0..values.ncols()).map(|k| t0 + k as f64 * dt).collect();
        Self::new(times, values)
    }

    pub fn constant(t0: f64, dt: f64, steps: usize, value: &[f64]) -> Result<Self> {
        let values = DMatrix::from_fn(value.len(), steps, |i, _| value[i]);
        Self::uniform(t0, dt, values)
    }

    pub fn zeros(t0: f64, dt: f64, channels: usize, steps: usize) -> Result<Self> {
        Self::uniform(t0, dt, DMatrix::zeros(channels, steps))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn sample(&self, k: usize) -> DVector<f64> {
        self.values.column(k).into_owned()
    }

    /// Zero-order-hold evaluation; times before the first sample use it.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        self.sample(k)
    }

    /// Spacing of a uniform grid (single-sample signals report `None`).
    pub fn uniform_spacing(&self) -> Result<Option<f64>> {
        if self.times.len() < 2 {
            return Ok(None);
        }
        let h = self.times[1] - self.times[0];
        let tol = 1e-9 * h.abs().max(self.times.last().unwrap().abs());
        for (k, t) in self.times.iter().enumerate() {
            if (t - (self.times[0] + k as f64 * h)).abs() > tol {
                return Err(Error::InvalidArgument("signal grid is not uniform".into()));
            }
        }
        Ok(Some(h))
    }

    /// Peak Euclidean norm over the samples.
    pub fn peak_norm(&self) -> f64 {
        self.values
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }
}

/// Exact discretization `Ad = exp(A dt)`, `Bd = ∫₀^dt exp(Aτ) dτ B`, computed
/// from the exponential of the augmented matrix `[[A, B], [0, 0]]`.
pub fn zoh_discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("sampling time must be positive, got {dt}")));
    }
    if !a.is_square() || b.nrows() != a.nrows() {
        return Err(Error::dim("zoh_discretize: A square and B row-conformant"));
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::NonFinite("zoh_discretize input"));
    }
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let phi = aug.exp();
    if !all_finite(&phi) {
        return Err(Error::Numerical(
            "matrix exponential overflowed; rescale the time units of A".into(),
        ));
    }
    Ok((
        phi.view((0, 0), (n, n)).into_owned(),
        phi.view((0, n), (n, m)).into_owned(),
    ))
}

/// Largest real part over the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::dim("spectral abscissa needs a square matrix"));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite("A"));
    }
    if a.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(linalg::eigenvalues(a)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// State and output trajectories on the refined output grid.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub x: SampledSignal,
    pub z: SampledSignal,
}

/// Number of output steps per input interval; errors unless `dt_out` divides
/// the input spacing.
pub(crate) fn refinement(h: f64, dt_out: f64) -> Result<usize> {
    if !(dt_out > 0.0) {
        return Err(Error::InvalidArgument("output step must be positive".into()));
    }
    let ratio = h / dt_out;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "output step {dt_out} does not divide the input spacing {h}"
        )));
    }
    Ok(m as usize)
}

/// Exact ZOH simulation of the plant.  The inputs hold over `K` intervals of
/// their (uniform) grid; the result has `K·m + 1` samples with `m = h/dt_out`.
/// An empty disturbance signal (`None`) means `w ≡ 0`.
pub fn simulate(
    sys: &LtiSystem,
    u: &SampledSignal,
    w: Option<&SampledSignal>,
    dt_out: f64,
) -> Result<Simulation> {
    let n = sys.n_states();
    if u.channels() != sys.n_inputs() {
        return Err(Error::dim("input signal channels do not match B"));
    }
    if let Some(w) = w {
        if w.channels() != sys.n_disturbances() {
            return Err(Error::dim("disturbance signal channels do not match E"));
        }
        if w.times != u.times {
            return Err(Error::InvalidArgument("u and w must share their sample grid".into()));
        }
    }
    let h = u.uniform_spacing()?.unwrap_or(dt_out);
    let m = refinement(h, dt_out)?;
    let step = h / m as f64;

    let bw = linalg::hstack(&[&sys.b, &sys.e]);
    let (ad, bd) = zoh_discretize(&sys.a, &bw, step)?;
    let nu = sys.n_inputs();

    let total = u.len() * m;
    let mut xs = DMatrix::zeros(n, total + 1);
    let mut x = sys.x0.clone();
    xs.set_column(0, &x);
    let mut input = DVector::zeros(bw.ncols());
    for k in 0..u.len() {
        input.rows_mut(0, nu).copy_from(&u.values.column(k));
        if let Some(w) = w {
            input.rows_mut(nu, sys.n_disturbances()).copy_from(&w.values.column(k));
        }
        let drive = &bd * &input;
        for j in 0..m {
            x = &ad * &x + &drive;
            xs.set_column(k * m + j + 1, &x);
        }
    }
    let times: Vec<f64> = (0..=total).map(|j| u.times[0] + j as f64 * step).collect();
    let zs = &sys.c * &xs;
    Ok(Simulation {
        x: SampledSignal::new(times.clone(), xs)?,
        z: SampledSignal::new(times, zs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrator_discretization() {
        let (ad, bd) = zoh_discretize(&DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 1.0), 2.0).unwrap();
        assert_relative_eq!(ad[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(bd[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn double_integrator_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let h = 0.7;
        let (ad, bd) = zoh_discretize(&a, &b, h).unwrap();
        let ad_ref = DMatrix::from_row_slice(2, 2, &[1.0, h, 0.0, 1.0]);
        let bd_ref = DMatrix::from_row_slice(2, 1, &[h * h / 2.0, h]);
        assert!((ad - ad_ref).norm() < 1e-14);
        assert!((bd - bd_ref).norm() < 1e-14);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert!(zoh_discretize(&a, &b, 0.0).is_err());
        let bad = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(zoh_discretize(&bad, &b, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn abscissa_of_diagonal_and_element() {
        assert_relative_eq!(spectral_abscissa(&(-DMatrix::identity(2, 2))).unwrap(), -1.0, epsilon = 1e-14);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -10.0, -20.0]);
        // λ² + 20λ + 10 = 0
        let root = -10.0 + (100.0f64 - 10.0).sqrt();
        assert_relative_eq!(spectral_abscissa(&a).unwrap(), root, epsilon = 1e-12);
    }

    #[test]
    fn defective_matrix_is_not_an_error() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        assert_relative_eq!(spectral_abscissa(&a).unwrap(), -1.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_equilibrium_stays_put() {
        let sys = LtiSystem::without_disturbance(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let u = SampledSignal::zeros(0.0, 0.5, 1, 10).unwrap();
        let sim = simulate(&sys, &u, None, 0.25).unwrap();
        assert_eq!(sim.x.len(), 21);
        assert_eq!(sim.z.values.norm(), 0.0);
    }

    #[test]
    fn first_order_step_response() {
        let sys = LtiSystem::without_disturbance(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let u = SampledSignal::constant(0.0, 0.5, 2, &[1.0]).unwrap();
        let sim = simulate(&sys, &u, None, 0.1).unwrap();
        let last = sim.z.values[(0, sim.z.len() - 1)];
        assert_relative_eq!(last, 1.0 - (-1.0f64).exp(), epsilon = 1e-13);
        assert_relative_eq!(*sim.z.times.last().unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let sys = LtiSystem::without_disturbance(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let u = SampledSignal::constant(0.0, 1.0, 3, &[1.0]).unwrap();
        assert!(simulate(&sys, &u, None, 0.3).is_err());
    }

    #[test]
    fn zoh_lookup() {
        let s = SampledSignal::uniform(0.0, 1.0, DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.at(0.5)[0], 1.0);
        assert_eq!(s.at(1.0)[0], 2.0);
        assert_eq!(s.at(7.0)[0], 3.0);
        assert!(SampledSignal::new(vec![0.0, 0.0], DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn lipschitz_of_affine_constraint() {
        let g = AffineConstraint { a: vec![3.0, 4.0], b: -1.0 };
        assert_relative_eq!(g.lipschitz(), 5.0);
        assert_relative_eq!(g.eval(&[1.0, 1.0]), 6.0);
    }
}
