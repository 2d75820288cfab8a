//! Mass–spring–damper chain used as the reference plant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::LtiSystem;

/// Physical parameters of the chain.  Mass 1 hangs on the wall, the input
/// force acts on the last mass and the output is the position of mass 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainParams {
    pub n_masses: usize,
    pub mass: f64,
    pub spring: f64,
    pub damper: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { n_masses: 50, mass: 1.0, spring: 10.0, damper: 20.0 }
    }
}

impl ChainParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_masses == 0 {
            return Err(Error::InvalidArgument("chain needs at least one mass".into()));
        }
        for (v, name) in [(self.mass, "mass"), (self.spring, "spring"), (self.damper, "damper")] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Coupling pattern of the chain: `2` on the diagonal except `1` for the
/// free end, `-1` between neighbours.
fn coupling(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            if i + 1 == n { 1.0 } else { 2.0 }
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Chain in position/velocity coordinates `x = [q; q̇]`.  When
/// `with_disturbance` is set, `E` is a force on the actuated mass; otherwise
/// `E` has no columns.
pub fn build_chain(p: &ChainParams, with_disturbance: bool) -> Result<LtiSystem> {
    p.validate()?;
    let n = p.n_masses;
    let t = coupling(n);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).fill_with_identity();
    a.view_mut((n, 0), (n, n)).copy_from(&(&t * (-p.spring / p.mass)));
    a.view_mut((n, n), (n, n)).copy_from(&(&t * (-p.damper / p.mass)));
    let mut b = DMatrix::zeros(2 * n, 1);
    b[(2 * n - 1, 0)] = 1.0 / p.mass;
    let e = if with_disturbance { b.clone() } else { DMatrix::zeros(2 * n, 0) };
    let mut c = DMatrix::zeros(1, 2 * n);
    c[(0, 0)] = 1.0;
    LtiSystem::new(a, b, e, c, DVector::zeros(2 * n))
}

/// Kinetic plus spring energy of a chain state.
pub fn mechanical_energy(p: &ChainParams, x: &DVector<f64>) -> f64 {
    let n = p.n_masses;
    let q = x.rows(0, n);
    let v = x.rows(n, n);
    let spring = (q.transpose() * coupling(n) * q)[(0, 0)];
    0.5 * p.mass * v.norm_squared() + 0.5 * p.spring * spring
}
