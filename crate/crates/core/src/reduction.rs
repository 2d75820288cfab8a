//! Petrov–Galerkin reduction, the lumped-plus-modal basis, and the exact
//! decomposition of the plant into reduced model plus error dynamics.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, hstack, C64};
use crate::lti::{refinement, zoh_discretize, LtiSystem, SampledSignal};

/// Reduced model `ẋ_r = A_r x_r + B_r u`, `z_r = C_r x_r` with projection
/// pair `(V, W)`, `WᵀV = I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReducedModel {
    #[serde(with = "crate::serde_mat")]
    pub v: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub w: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub a_r: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b_r: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c_r: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub x_r0: DVector<f64>,
}

impl ReducedModel {
    pub fn order(&self) -> usize {
        self.a_r.nrows()
    }

    /// Oblique residual projector `I − V Wᵀ`.
    pub fn residual_projector(&self) -> DMatrix<f64> {
        let n = self.v.nrows();
        DMatrix::identity(n, n) - &self.v * self.w.transpose()
    }

    pub fn as_system(&self) -> Result<LtiSystem> {
        let n = self.order();
        LtiSystem::new(
            self.a_r.clone(),
            self.b_r.clone(),
            DMatrix::zeros(n, 0),
            self.c_r.clone(),
            self.x_r0.clone(),
        )
    }
}

/// Error dynamics `ė = A e + B_e r`, `z_e = C e` driven by the lumped input
/// `r = [w; x_r; u]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorDynamics {
    #[serde(with = "crate::serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub b_e: DMatrix<f64>,
    #[serde(with = "crate::serde_mat")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::serde_mat::vector")]
    pub e0: DVector<f64>,
    pub n_w: usize,
    pub n_r: usize,
    pub n_u: usize,
}

impl ErrorDynamics {
    pub fn n_lumped(&self) -> usize {
        self.n_w + self.n_r + self.n_u
    }
}

/// How the low-dimensional "lumped" part of the basis is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LumpedBasis {
    /// Uniform position pattern and uniform velocity pattern for a
    /// position/velocity ordered state.
    #[default]
    RigidBody,
    /// Modal columns only.
    None,
}

fn lumped_columns(sys: &LtiSystem, kind: LumpedBasis) -> Result<DMatrix<f64>> {
    let n = sys.n_states();
    match kind {
        LumpedBasis::None => Ok(DMatrix::zeros(n, 0)),
        LumpedBasis::RigidBody => {
            if n % 2 != 0 {
                return Err(Error::InvalidArgument(
                    "rigid-body lumped basis needs position/velocity pairs".into(),
                ));
            }
            let h = n / 2;
            let scale = 1.0 / (h as f64).sqrt();
            Ok(DMatrix::from_fn(n, 2, |i, j| if (i < h) == (j == 0) { scale } else { 0.0 }))
        }
    }
}

fn eigenvector(a: &DMatrix<f64>, mu: C64) -> Result<DVector<C64>> {
    let n = a.nrows();
    let shift = mu + C64::new(1e-10 * (1.0 + mu.norm()), 1e-10 * (1.0 + mu.norm()));
    let mut m = linalg::to_complex(a);
    for i in 0..n {
        m[(i, i)] -= shift;
    }
    let lu = m.lu();
    let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + 0.1 * i as f64, 0.3));
    for _ in 0..4 {
        v = lu
            .solve(&v)
            .ok_or_else(|| Error::Numerical("inverse iteration failed".into()))?;
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numerical("inverse iteration produced a degenerate vector".into()));
        }
        v /= Complex::new(norm, 0.0);
    }
    Ok(v)
}

/// Real basis of the `n_modes` slowest eigen-directions of `a` (largest real
/// part first, ties broken by smaller |imaginary part|).
pub fn slow_modal_columns(a: &DMatrix<f64>, n_modes: usize) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n_modes == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let eig = linalg::eigenvalues(a)?;
    let scale = eig.iter().map(|l| l.norm()).fold(0.0, f64::max).max(1e-300);
    let mut reps: Vec<C64> = eig
        .into_iter()
        .filter(|l| l.im >= -1e-10 * scale)
        .map(|l| if l.im.abs() <= 1e-10 * scale { C64::new(l.re, 0.0) } else { l })
        .collect();
    reps.sort_by(|x, y| {
        y.re.partial_cmp(&x.re)
            .unwrap()
            .then(x.im.abs().partial_cmp(&y.im.abs()).unwrap())
    });
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n_modes);
    for mu in reps {
        if cols.len() == n_modes {
            break;
        }
        let v = eigenvector(a, mu)?;
        if mu.im == 0.0 {
            // real eigenvalue: the eigenvector is real up to a phase
            let k = (0..v.len())
                .max_by(|&i, &j| v[i].norm().partial_cmp(&v[j].norm()).unwrap())
                .unwrap();
            let phase = v[k] / Complex::new(v[k].norm(), 0.0);
            cols.push(v.map(|c| (c / phase).re));
        } else {
            if cols.len() + 2 > n_modes {
                return Err(Error::InvalidArgument(format!(
                    "n_modes = {n_modes} splits a complex-conjugate pair"
                )));
            }
            cols.push(v.map(|c| c.re));
            cols.push(v.map(|c| c.im));
        }
    }
    if cols.len() < n_modes {
        return Err(Error::InvalidArgument("not enough eigenmodes".into()));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Orthonormal lumped-plus-modal trial basis with `W = V`.
pub fn modal_lumped_projection(
    sys: &LtiSystem,
    n_modes: usize,
    lumped: LumpedBasis,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    sys.require_hurwitz()?;
    let n = sys.n_states();
    let raw = hstack(&[&lumped_columns(sys, lumped)?, &slow_modal_columns(&sys.a, n_modes)?]);
    if raw.ncols() > n {
        return Err(Error::InvalidArgument(format!(
            "basis has {} columns but the state has dimension {n}",
            raw.ncols()
        )));
    }
    let v = orthonormalize(&raw)?;
    Ok((v.clone(), v))
}

/// Orthonormal basis for the column span; rejects (numerically) dependent
/// columns.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = m.ncols();
    if k == 0 {
        return Ok(m.clone());
    }
    // normalize columns first so the rank test is scale free
    let mut scaled = m.clone();
    for mut c in scaled.column_iter_mut() {
        let nrm = c.norm();
        if nrm == 0.0 {
            return Err(Error::RankDeficient("zero basis column".into()));
        }
        c /= nrm;
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag_min = (0..k).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if diag_min < 1e-10 {
        return Err(Error::RankDeficient(format!(
            "basis columns are nearly dependent (min |R_ii| = {diag_min:.2e}); choose a different number of modes"
        )));
    }
    Ok(qr.q())
}

/// Petrov–Galerkin reduced model `A_r = WᵀAV`, `B_r = WᵀB`, `C_r = CV`,
/// `x_r0 = Wᵀx0`.
pub fn petrov_galerkin_reduce(sys: &LtiSystem, v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<ReducedModel> {
    let n = sys.n_states();
    if v.nrows() != n || w.shape() != v.shape() {
        return Err(Error::dim("V and W must both be n_f x n_r"));
    }
    let k = v.ncols();
    let bi = (w.transpose() * v - DMatrix::<f64>::identity(k, k)).norm();
    if bi > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "WᵀV deviates from the identity by {bi:.2e}"
        )));
    }
    let wt = w.transpose();
    Ok(ReducedModel {
        v: v.clone(),
        w: w.clone(),
        a_r: &wt * &sys.a * v,
        b_r: &wt * &sys.b,
        c_r: &sys.c * v,
        x_r0: &wt * &sys.x0,
    })
}

/// Error dynamics with `B_e = [E, (I − VWᵀ)AV, (I − VWᵀ)B]` and
/// `e0 = (I − VWᵀ)x0`.
pub fn error_dynamics(sys: &LtiSystem, rom: &ReducedModel) -> Result<ErrorDynamics> {
    if rom.v.nrows() != sys.n_states() || rom.b_r.ncols() != sys.n_inputs() {
        return Err(Error::dim("reduced model does not belong to this plant"));
    }
    let res = rom.residual_projector();
    let mid = &res * &sys.a * &rom.v;
    let last = &res * &sys.b;
    Ok(ErrorDynamics {
        a: sys.a.clone(),
        b_e: hstack(&[&sys.e, &mid, &last]),
        c: sys.c.clone(),
        e0: &res * &sys.x0,
        n_w: sys.n_disturbances(),
        n_r: rom.order(),
        n_u: sys.n_inputs(),
    })
}

/// Jointly simulated reduced model and error system.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub times: Vec<f64>,
    pub x_r: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub z_r: DMatrix<f64>,
    pub z_e: DMatrix<f64>,
}

impl Reconstruction {
    pub fn z(&self) -> DMatrix<f64> {
        &self.z_r + &self.z_e
    }
}

/// Simulates `x_r` and `e` side by side (exact ZOH) and returns the pieces of
/// `z = z_r + z_e`.
pub fn reconstruct_full_output(
    sys: &LtiSystem,
    rom: &ReducedModel,
    err: &ErrorDynamics,
    u: &SampledSignal,
    w: Option<&SampledSignal>,
    dt_out: f64,
) -> Result<Reconstruction> {
    let (n, k) = (sys.n_states(), rom.order());
    let (nu, nw) = (sys.n_inputs(), sys.n_disturbances());
    if u.channels() != nu {
        return Err(Error::dim("input channels"));
    }
    if let Some(w) = w {
        if w.times != u.times || w.channels() != nw {
            return Err(Error::InvalidArgument("u and w must share their sample grid".into()));
        }
    }
    let h = u.uniform_spacing()?.unwrap_or(dt_out);
    let m = refinement(h, dt_out)?;
    let step = h / m as f64;

    let be_w = err.b_e.columns(0, nw).into_owned();
    let be_x = err.b_e.columns(nw, k).into_owned();
    let be_u = err.b_e.columns(nw + k, nu).into_owned();
    let mut aj = DMatrix::zeros(k + n, k + n);
    aj.view_mut((0, 0), (k, k)).copy_from(&rom.a_r);
    aj.view_mut((k, 0), (n, k)).copy_from(&be_x);
    aj.view_mut((k, k), (n, n)).copy_from(&err.a);
    let mut bj = DMatrix::zeros(k + n, nu + nw);
    bj.view_mut((0, 0), (k, nu)).copy_from(&rom.b_r);
    bj.view_mut((k, 0), (n, nu)).copy_from(&be_u);
    bj.view_mut((k, nu), (n, nw)).copy_from(&be_w);
    let (ad, bd) = zoh_discretize(&aj, &bj, step)?;

    let total = u.len() * m;
    let mut states = DMatrix::zeros(k + n, total + 1);
    let mut s = DVector::zeros(k + n);
    s.rows_mut(0, k).copy_from(&rom.x_r0);
    s.rows_mut(k, n).copy_from(&err.e0);
    states.set_column(0, &s);
    let mut input = DVector::zeros(nu + nw);
    for idx in 0..u.len() {
        input.rows_mut(0, nu).copy_from(&u.values.column(idx));
        if let Some(w) = w {
            input.rows_mut(nu, nw).copy_from(&w.values.column(idx));
        }
        let drive = &bd * &input;
        for j in 0..m {
            s = &ad * &s + &drive;
            states.set_column(idx * m + j + 1, &s);
        }
    }
    let x_r = states.rows(0, k).into_owned();
    let e = states.rows(k, n).into_owned();
    Ok(Reconstruction {
        times: (0..=total).map(|j| u.times[0] + j as f64 * step).collect(),
        z_r: &rom.c_r * &x_r,
        z_e: &err.c * &e,
        x_r,
        e,
    })
}
