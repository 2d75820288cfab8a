#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use romtube::linalg::hstack;
use romtube::lti::{spectral_abscissa, LtiSystem, SampledSignal};
use romtube::reduction::{error_dynamics, orthonormalize, petrov_galerkin_reduce, ErrorDynamics, ReducedModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random matrix shifted so that its spectral abscissa is `-margin`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, n, n);
    let alpha = spectral_abscissa(&a).unwrap();
    a - DMatrix::identity(n, n) * (alpha + margin)
}

pub fn random_system(rng: &mut ChaCha8Rng, n: usize, nu: usize, nw: usize, nz: usize) -> LtiSystem {
    let margin = rng.gen_range(0.2..1.0);
    let a = stable_matrix(rng, n, margin);
    let b = gaussian_matrix(rng, n, nu);
    let e = gaussian_matrix(rng, n, nw);
    let c = gaussian_matrix(rng, nz, n);
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    LtiSystem::new(a, b, e, c, x0).unwrap()
}

/// Random trial basis `V` and test basis `W` with `WᵀV = I`.  `V` has
/// orthonormal columns and `W` is an oblique perturbation of it; draws with an
/// ill-conditioned `YᵀV` are redrawn so the projector stays moderate.
pub fn random_projection(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let v = gaussian_matrix(rng, n, k).qr().q();
    loop {
        let y = &v + gaussian_matrix(rng, n, k) * 0.3;
        let m = y.transpose() * &v;
        let sv = m.singular_values();
        if sv.min() * 10.0 < sv.max() {
            continue;
        }
        let w = &y * m.try_inverse().unwrap().transpose();
        return (v, w);
    }
}

pub fn random_signal(rng: &mut ChaCha8Rng, channels: usize, steps: usize, dt: f64, amp: f64) -> SampledSignal {
    let v = DMatrix::from_fn(channels, steps, |_, _| rng.gen_range(-amp..=amp));
    SampledSignal::uniform(0.0, dt, v).unwrap()
}

/// Classical fourth-order Runge-Kutta for `ẋ = A x + f` with constant `f`.
pub fn rk4(a: &DMatrix<f64>, f: &DVector<f64>, x0: &DVector<f64>, t: f64, steps: usize) -> DVector<f64> {
    let h = t / steps as f64;
    let rhs = |x: &DVector<f64>| a * x + f;
    let mut x = x0.clone();
    for _ in 0..steps {
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (h / 2.0)));
        let k3 = rhs(&(&x + &k2 * (h / 2.0)));
        let k4 = rhs(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// `∫₀ʰ e^{-ρ(h-τ)} x(τ)ᵀ G x(τ) dτ` for `ẋ = F x`, as a quadratic form in
/// `x(0)`, via the block exponential of `[[-(F+ρ/2)ᵀ, G], [0, F+ρ/2]]`.
pub fn weighted_quadratic_integral(f: &DMatrix<f64>, g: &DMatrix<f64>, rho: f64, h: f64) -> DMatrix<f64> {
    let n = f.nrows();
    let fs = f + DMatrix::identity(n, n) * (rho / 2.0);
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-fs.transpose()));
    big.view_mut((0, n), (n, n)).copy_from(g);
    big.view_mut((n, n), (n, n)).copy_from(&fs);
    let e = (big * h).exp();
    let phi22 = e.view((n, n), (n, n)).into_owned();
    let phi12 = e.view((0, n), (n, n)).into_owned();
    let w = phi22.transpose() * phi12;
    (&w + w.transpose()) * (0.5 * (-rho * h).exp())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

/// Random single-input, single-output plant with a Galerkin model whose basis
/// contains `A⁻ᵀCᵀ`, so the error output has zero static gain from the model
/// channels (a high-pass certificate cannot exist otherwise).
pub fn dc_matched_plant(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    nw: usize,
    x0_zero: bool,
) -> (LtiSystem, ReducedModel, ErrorDynamics) {
    let mut sys = random_system(rng, n, 1, nw, 1);
    if x0_zero {
        sys.x0.fill(0.0);
    }
    let dc = sys.a.transpose().try_inverse().unwrap() * sys.c.transpose();
    let v = orthonormalize(&hstack(&[&dc, &gaussian_matrix(rng, n, k - 1)])).unwrap();
    let rom = petrov_galerkin_reduce(&sys, &v, &v).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    (sys, rom, err)
}
