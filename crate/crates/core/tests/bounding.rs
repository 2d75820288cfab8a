mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use romtube::benchmark::{build_chain, ChainParams};
use romtube::bounding::{
    build_augmented_system, build_highpass_filter, build_highpass_filter_mixed, comparison_trajectory,
    containment_check, highpass_energy_gram, optimal_normalization, simulate_bound, BoundingFilter, RobustPredictor,
};
use romtube::linalg::{hstack, sym_pow};
use romtube::lti::{spectral_abscissa, zoh_discretize, LtiSystem, SampledSignal};
use romtube::reduction::{
    error_dynamics, modal_lumped_projection, petrov_galerkin_reduce, ErrorDynamics, LumpedBasis,
    ReducedModel,
};
use romtube::synthesis::{
    filtered_peak_gain_lmi, peak_gain_lmi, GainCertificate, PeakLmiData,
};

fn benchmark() -> (LtiSystem, ReducedModel, ErrorDynamics) {
    let sys = build_chain(&ChainParams::default(), false).unwrap();
    let (v, w) = modal_lumped_projection(&sys, 6, LumpedBasis::RigidBody).unwrap();
    let rom = petrov_galerkin_reduce(&sys, &v, &w).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    (sys, rom, err)
}

fn small_plant(seed: u64, n: usize, k: usize, nw: usize) -> (LtiSystem, ReducedModel, ErrorDynamics) {
    common::dc_matched_plant(&mut common::rng(seed), n, k, nw, false)
}

/// Walks `(1/(λγ))‖z‖² ≤ V ≤ δ` along a trajectory with piecewise-constant
/// input, integrating `δ` exactly; returns the worst normalized violation.
fn chain_violation(data: &PeakLmiData, cert: &GainCertificate, x0: &DVector<f64>, r: &SampledSignal, h: f64) -> f64 {
    let (n, m) = (data.a.nrows(), data.b.ncols());
    let mut f = DMatrix::zeros(n + m, n + m);
    f.view_mut((0, 0), (n, n)).copy_from(&data.a);
    f.view_mut((0, n), (n, m)).copy_from(&data.b);
    let l = hstack(&[&data.c_y, &data.d_y]);
    let g = l.transpose() * l * cert.gamma;
    let w = common::weighted_quadratic_integral(&f, &g, cert.lambda, h);
    let (ad, bd) = zoh_discretize(&data.a, &data.b, h).unwrap();
    let mut x = x0.clone();
    let mut delta = cert.weighted_norm_sq(x0);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..r.len() {
        let rk = r.sample(k);
        let mut s = DVector::zeros(n + m);
        s.rows_mut(0, n).copy_from(&x);
        s.rows_mut(n, m).copy_from(&rk);
        delta = (-cert.lambda * h).exp() * delta + (s.transpose() * &w * &s)[(0, 0)];
        x = &ad * &x + &bd * &rk;
        let v = cert.weighted_norm_sq(&x);
        let z2 = (&data.c_z * &x).norm_squared();
        worst = worst
            .max((z2 / (cert.lambda * cert.gamma) - v) / (1.0 + v.abs()))
            .max((v - delta) / (1.0 + delta.abs()));
    }
    worst
}

#[test]
fn unfiltered_chain_holds_on_random_systems() {
    for seed in 0..8 {
        let mut rng = common::rng(10 + seed);
        let n = rng.gen_range(2..=6);
        let (_, _, mut err) = small_plant(10 + seed, n + 2, 2, 0);
        err.e0 = DVector::from_fn(err.a.nrows(), |_, _| rng.gen_range(-1.0..1.0));
        let cert = peak_gain_lmi(&err, 0.15).unwrap();
        let r = common::random_signal(&mut rng, err.b_e.ncols(), 60, 0.25, 1.0);
        let v = chain_violation(&PeakLmiData::from_error(&err), &cert, &err.e0, &r, 0.25);
        assert!(v <= 1e-7, "seed {seed}: {v:e}");
    }
}

#[test]
fn filtered_chain_holds_on_random_systems() {
    for seed in 0..6 {
        let mut rng = common::rng(50 + seed);
        let (_, rom, err) = small_plant(50 + seed, 6, 2, 0);
        let omega = 2.0 * spectral_abscissa(&rom.a_r).unwrap().abs().max(0.1);
        let f = build_highpass_filter(&rom, omega, &[1.0, 2.0, 0.5], 0).unwrap();
        let aug = build_augmented_system(&err, &f).unwrap();
        let cert = filtered_peak_gain_lmi(&aug, 0.1).unwrap();
        let mut chi0 = DVector::zeros(aug.n_states());
        chi0.rows_mut(0, 6).copy_from(&DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0)));
        let r = common::random_signal(&mut rng, aug.b_chi.ncols(), 60, 0.25, 1.0);
        let v = chain_violation(&aug.lmi_data(), &cert, &chi0, &r, 0.25);
        assert!(v <= 1e-7, "seed {seed}: {v:e}");
    }
}

#[test]
fn benchmark_filter_dimensions() {
    let (_, rom, err) = benchmark();
    let f = build_highpass_filter(&rom, 0.1, &[1.0; 9], 0).unwrap();
    assert_eq!(f.n_states(), 9);
    let aug = build_augmented_system(&err, &f).unwrap();
    assert_eq!(aug.a_chi.shape(), (109, 109));
    assert!(spectral_abscissa(&aug.a_chi).unwrap() < 0.0);

    let id = build_augmented_system(&err, &BoundingFilter::identity(0, 8, 1)).unwrap();
    assert_eq!(id.a_chi, err.a);
    assert_eq!(id.c_chi.shape(), (9, 100));
    assert_eq!(id.c_chi.amax(), 0.0);
    assert_eq!(id.d_chi, DMatrix::identity(9, 9));
}

/// `‖r_ψ(t)‖` for constant input `v` and `ψ(0) = 0`.
fn filtered_constant(f: &BoundingFilter, v: &DVector<f64>, t: f64) -> f64 {
    let psi = if t == 0.0 {
        DVector::zeros(f.n_states())
    } else {
        let (_, bd) = zoh_discretize(&f.a_psi, &f.b_psi, t).unwrap();
        &bd * v
    };
    (&f.c_psi * psi + &f.d_psi * v).norm()
}

#[test]
fn filters_reject_constants() {
    let (_, rom, _) = benchmark();
    let mut rng = common::rng(70);
    let omega = 0.0967;
    let g = common::gaussian_matrix(&mut rng, 9, 9);
    let spd = &g * g.transpose() + DMatrix::identity(9, 9);
    let filters = [
        build_highpass_filter(&rom, omega, &[0.5, 1.0, 2.0, 1.0, 1.0, 3.0, 1.0, 0.1, 10.0], 0).unwrap(),
        build_highpass_filter_mixed(&rom, omega, &sym_pow(&spd, -0.5).unwrap(), 0).unwrap(),
    ];
    for f in &filters {
        for _ in 0..5 {
            let v = DVector::from_fn(9, |_, _| rng.gen_range(-5.0..5.0));
            let start = filtered_constant(f, &v, 0.0);
            for factor in [10.0, 12.0, 30.0] {
                let later = filtered_constant(f, &v, factor / omega);
                assert!(later <= 1e-3 * start, "{later} vs {start}");
            }
        }
    }
}

#[test]
fn exact_projection_is_trivially_contained() {
    let mut rng = common::rng(80);
    let sys = common::random_system(&mut rng, 4, 1, 0, 1);
    let eye = DMatrix::identity(4, 4);
    let rom = petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    let f = build_highpass_filter(&rom, 1.0, &[1.0; 5], 0).unwrap();
    let cert = filtered_peak_gain_lmi(&build_augmented_system(&err, &f).unwrap(), 0.2).unwrap();
    let pred = RobustPredictor::new(rom, f, cert, 0.0, &sys.x0).unwrap();
    assert_eq!(pred.delta0, 0.0);
    let u = common::random_signal(&mut rng, 1, 30, 0.5, 2.0);
    let rep = containment_check(&sys, &pred, &u, None, 0.25).unwrap();
    assert!(rep.pass);
    assert!(rep.peak_error < 1e-10);
    let tube = simulate_bound(&pred, &u, 0.25).unwrap();
    assert!(pred.cert.gamma <= 1e-9);
    assert!(tube.delta_z.iter().all(|d| *d <= 1e-9));
}

fn disturbed_predictor(seed: u64, w_bar: f64) -> (LtiSystem, RobustPredictor, ErrorDynamics) {
    let (sys, rom, err) = small_plant(seed, 4, 2, 1);
    let omega = 2.0 * spectral_abscissa(&rom.a_r).unwrap().abs().max(0.1);
    let f = build_highpass_filter(&rom, omega, &[1.0; 3], 1).unwrap();
    let aug = build_augmented_system(&err, &f).unwrap();
    let cert = filtered_peak_gain_lmi(&aug, 0.1).unwrap();
    let pred = RobustPredictor::new(rom, f, cert, w_bar, &sys.x0).unwrap();
    (sys, pred, err)
}

#[test]
fn adversarial_disturbances_stay_inside_the_tube() {
    let w_bar = 0.5;
    for seed in 0..4 {
        let (sys, pred, _) = disturbed_predictor(90 + seed, w_bar);
        let mut rng = common::rng(190 + seed);
        let u = common::random_signal(&mut rng, 1, 40, 0.5, 1.0);
        // worst-case probe: full-magnitude w following the sign of the
        // error-output response to the disturbance channel
        let mut pattern = DMatrix::zeros(1, 40);
        for k in 0..40 {
            let t = (40 - k) as f64 * 0.5;
            let (ad, _) = zoh_discretize(&sys.a, &sys.b, t).unwrap();
            let gain = (&sys.c * ad * &sys.e)[(0, 0)];
            pattern[(0, k)] = w_bar * gain.signum();
        }
        let w = SampledSignal::uniform(0.0, 0.5, pattern).unwrap();
        let rep = containment_check(&sys, &pred, &u, Some(&w), 0.125).unwrap();
        assert!(rep.pass, "margin {}", rep.max_margin);
        let neg = SampledSignal::uniform(0.0, 0.5, -&w.values).unwrap();
        assert!(containment_check(&sys, &pred, &u, Some(&neg), 0.125).unwrap().pass);
    }
}

#[test]
fn inflated_disturbance_bound_dominates_the_exact_one() {
    let w_bar = 0.5;
    let (sys, pred, err) = disturbed_predictor(120, w_bar);
    let mut rng = common::rng(121);
    let (h, steps, refine) = (0.5, 40, 4);
    let u = common::random_signal(&mut rng, 1, steps, h, 1.0);
    let w = common::random_signal(&mut rng, 1, steps, h, w_bar);
    let tube = simulate_bound(&pred, &u, h / refine as f64).unwrap();

    // joint state [x_r; e; ψ; w; u] with the inputs held constant
    let (rom, f, cert) = (&pred.rom, &pred.filter, &pred.cert);
    let (k, n, np) = (rom.order(), err.a.nrows(), f.n_states());
    let dim = k + n + np + 2;
    let (iw, iu) = (k + n + np, k + n + np + 1);
    let mut big = DMatrix::zeros(dim, dim);
    // r = [w; x_r; u] as a row block of the joint state
    let mut r_sel = DMatrix::zeros(err.b_e.ncols(), dim);
    r_sel[(0, iw)] = 1.0;
    for i in 0..k {
        r_sel[(1 + i, i)] = 1.0;
    }
    r_sel[(1 + k, iu)] = 1.0;
    big.view_mut((0, 0), (k, k)).copy_from(&rom.a_r);
    big.view_mut((0, iu), (k, 1)).copy_from(&rom.b_r);
    big.view_mut((k, k), (n, n)).copy_from(&err.a);
    big.view_mut((k, 0), (n, dim)).add_assign_from(&(&err.b_e * &r_sel));
    big.view_mut((k + n, k + n), (np, np)).copy_from(&f.a_psi);
    big.view_mut((k + n, 0), (np, dim)).add_assign_from(&(&f.b_psi * &r_sel));
    let mut out = &f.d_psi * &r_sel;
    out.view_mut((0, k + n), (f.c_psi.nrows(), np)).add_assign_from(&f.c_psi);
    let step = h / refine as f64;
    let gram = common::weighted_quadratic_integral(&big, &(out.transpose() * &out * cert.gamma), cert.lambda, step);
    let phi = (&big * step).exp();

    let mut s = DVector::zeros(dim);
    s.rows_mut(0, k).copy_from(&rom.x_r0);
    s.rows_mut(k, n).copy_from(&err.e0);
    let mut delta = pred.delta0;
    let mut idx = 0;
    for j in 0..steps {
        s[iw] = w.sample(j)[0];
        s[iu] = u.sample(j)[0];
        for _ in 0..refine {
            delta = (-cert.lambda * step).exp() * delta + (s.transpose() * &gram * &s)[(0, 0)];
            s = &phi * &s;
            idx += 1;
            assert!(delta <= tube.delta_chi[idx] * (1.0 + 1e-9) + 1e-12, "{delta} > {}", tube.delta_chi[idx]);
            let z_e = (&err.c * s.rows(k, n)).norm();
            assert!(z_e <= tube.delta_z[idx] + 1e-9);
        }
    }
    let _ = sys;
}

#[test]
fn optimal_normalization_minimizes_gain_times_energy() {
    let mut rng = common::rng(130);
    let spd = |rng: &mut _| {
        let g = common::gaussian_matrix(rng, 4, 4);
        &g * g.transpose() + DMatrix::identity(4, 4) * 0.1
    };
    let q = spd(&mut rng);
    let h = spd(&mut rng);
    let m = optimal_normalization(&q, &h, 1e-12).unwrap();
    assert!((m.clone().symmetric_eigen().eigenvalues.amax() - 1.0).abs() < 1e-10);
    let objective = |n: &DMatrix<f64>| q.dot(n) * h.dot(&n.clone().try_inverse().unwrap());
    let n_opt = (&m * &m).try_inverse().unwrap();
    let best = objective(&n_opt);
    // stationarity: N Q N is proportional to H
    let nqn = &n_opt * &q * &n_opt;
    let ratio = nqn[(0, 0)] / h[(0, 0)];
    assert!((nqn - &h * ratio).amax() <= 1e-6 * ratio * h.amax());
    assert!(best <= objective(&DMatrix::identity(4, 4)) * (1.0 + 1e-9));
    for _ in 0..50 {
        let n = spd(&mut rng);
        assert!(best <= objective(&n) * (1.0 + 1e-9));
    }
}

#[test]
fn energy_gram_of_a_resting_model_is_zero() {
    let (_, rom, _) = benchmark();
    let u = SampledSignal::zeros(0.0, 2.0, 1, 20).unwrap();
    let g = highpass_energy_gram(&rom, 0.1, &u, 1.0).unwrap();
    assert_eq!(g.amax(), 0.0);
    let mut rng = common::rng(140);
    let u = common::random_signal(&mut rng, 1, 20, 2.0, 10.0);
    let g = highpass_energy_gram(&rom, 0.1, &u, 1.0).unwrap();
    assert!((&g - g.transpose()).amax() <= 1e-12 * g.amax());
    assert!(g.clone().symmetric_eigen().eigenvalues.min() >= -1e-9 * g.amax());
}

proptest! {
    #[test]
    fn comparison_is_monotone_in_the_drive(
        base in prop::collection::vec(0.0f64..5.0, 1..40),
        extra in prop::collection::vec(0.0f64..5.0, 40),
        d0 in 0.0f64..3.0,
        extra0 in 0.0f64..1.0,
        rate in 0.01f64..2.0,
        gain in 0.1f64..10.0,
    ) {
        let bigger: Vec<f64> = base.iter().zip(&extra).map(|(a, b)| a + b).collect();
        let lo = comparison_trajectory(d0, rate, gain, &base, 0.3);
        let hi = comparison_trajectory(d0 + extra0, rate, gain, &bigger, 0.3);
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(a <= b);
        }
    }
}

trait AddAssignFrom {
    fn add_assign_from(&mut self, rhs: &DMatrix<f64>);
}

impl AddAssignFrom for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_from(&mut self, rhs: &DMatrix<f64>) {
        for i in 0..rhs.nrows() {
            for j in 0..rhs.ncols() {
                self[(i, j)] += rhs[(i, j)];
            }
        }
    }
}
