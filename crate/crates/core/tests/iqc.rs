mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use romtube::iqc::{
    alpha_linesearch, check_iqc, iqc_peak_lmi, prop2_equivalence_check, simulate_iqc_bound, GammaMode, IqcCertificate,
    IqcSystem, Multiplier,
};
use romtube::lti::SampledSignal;
use romtube::reduction::ErrorDynamics;
use romtube::synthesis::{peak_gain_lmi, SynthesisMethod, SynthesisOptions};

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

fn random_err(seed: u64, n: usize, m: usize) -> ErrorDynamics {
    let mut rng = common::rng(seed);
    let margin = rng.gen_range(0.2..1.0);
    let a = common::stable_matrix(&mut rng, n, margin);
    ErrorDynamics {
        a,
        b_e: common::gaussian_matrix(&mut rng, n, m),
        c: common::gaussian_matrix(&mut rng, 1, n),
        e0: DVector::zeros(n),
        n_w: 0,
        n_r: m - 1,
        n_u: 1,
    }
}

fn tied(sys: &IqcSystem, alpha: f64) -> IqcCertificate {
    iqc_peak_lmi(sys, &Multiplier::Trivial, &GammaMode::Tied, alpha, &SynthesisOptions::default()).unwrap()
}

#[test]
fn scalar_trivial_multiplier_recovers_unit_gain() {
    let cert = tied(&IqcSystem::from_error(&scalar_err()), 0.5);
    assert!((cert.implied_peak_gain() - 1.0).abs() < 1e-6);
    let r = prop2_equivalence_check(&scalar_err(), 1.0, &SynthesisOptions::default()).unwrap();
    assert!(r.pass);
    assert!((r.gamma_peak - 1.0).abs() < 1e-6);
}

#[test]
fn trivial_multiplier_matches_the_peak_certificate() {
    let conic = SynthesisOptions { method: SynthesisMethod::Conic, ..Default::default() };
    for seed in 0..10 {
        let err = random_err(100 + seed, 6, 3);
        let r = prop2_equivalence_check(&err, 0.2, &SynthesisOptions::default()).unwrap();
        assert!(r.pass, "seed {seed}: gap {}", r.relative_gap);
        // the conic route reaches the same gain independently
        let sys = IqcSystem::from_error(&err);
        let c = iqc_peak_lmi(&sys, &Multiplier::Trivial, &GammaMode::Tied, 0.1, &conic).unwrap();
        let peak = peak_gain_lmi(&err, 0.2).unwrap().gamma;
        assert!((c.implied_peak_gain() - peak).abs() <= 1e-2 * peak, "seed {seed}");
        assert!(check_iqc(&sys, &c).pass);
    }
}

#[test]
fn storage_must_dominate_x() {
    let sys = IqcSystem::from_error(&random_err(200, 3, 2));
    let big = Multiplier::Fixed { m: DMatrix::zeros(2, 2), x: DMatrix::identity(3, 3) * 1e6 };
    assert!(iqc_peak_lmi(&sys, &big, &GammaMode::Tied, 0.1, &SynthesisOptions::default()).is_err());
}

#[test]
fn comparison_ode_examples() {
    let cert = tied(&IqcSystem::from_error(&scalar_err()), 0.5);
    let zero = SampledSignal::zeros(0.0, 0.1, 1, 50).unwrap();
    assert!(simulate_iqc_bound(&cert, &zero, 0.0).unwrap().delta.iter().all(|d| *d == 0.0));
    let q = 0.7;
    let constant = SampledSignal::constant(0.0, 0.5, 200, &[q]).unwrap();
    let b = simulate_iqc_bound(&cert, &constant, 3.0).unwrap();
    let target = q / (2.0 * cert.alpha);
    assert!((b.delta.last().unwrap() - target).abs() < 1e-9);
    for (t, d) in b.times.iter().zip(&b.delta) {
        assert!(*d <= (-2.0 * cert.alpha * t).exp() * 3.0 + target + 1e-12);
    }
}

#[test]
fn bound_is_linear_in_the_weighting() {
    let mut rng = common::rng(300);
    let sys = IqcSystem::from_error(&random_err(300, 4, 2));
    let mode = GammaMode::Diagonal { weights: vec![1.0, 2.0] };
    let cert = iqc_peak_lmi(&sys, &Multiplier::Trivial, &mode, 0.2, &SynthesisOptions::default()).unwrap();
    assert!(check_iqc(&sys, &cert).pass);
    let w = common::random_signal(&mut rng, 2, 40, 0.5, 1.0);
    let drive = |c: &IqcCertificate| {
        let v = DMatrix::from_fn(1, 40, |_, k| c.weighted_input_sq(w.sample(k).as_slice()));
        SampledSignal::uniform(0.0, 0.5, v).unwrap()
    };
    let base = simulate_iqc_bound(&cert, &drive(&cert), 0.0).unwrap();
    for k in [0.3, 4.0] {
        let mut scaled = cert.clone();
        scaled.gamma_weights.iter_mut().for_each(|g| *g *= k);
        let b = simulate_iqc_bound(&scaled, &drive(&scaled), 0.0).unwrap();
        for (x, y) in base.delta.iter().zip(&b.delta) {
            assert!((y - k * x).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}

/// Random loop `ξ̇ = Aξ + B_Δ w_Δ + B_d d`, `w_Δ = Δ y_Δ` with `|Δ| ≤ ρ`.
fn uncertain_loop(seed: u64) -> (IqcSystem, IqcCertificate) {
    let mut rng = common::rng(seed);
    let n = 4;
    let a = common::stable_matrix(&mut rng, n, 1.0);
    let b = common::gaussian_matrix(&mut rng, n, 2);
    let mut c = DMatrix::zeros(2, n);
    c.row_mut(0).copy_from(&(common::gaussian_matrix(&mut rng, 1, n) * 0.3));
    let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
    let c_z = common::gaussian_matrix(&mut rng, 1, n);
    let sys = IqcSystem::new(a, b * 0.5, c, d, c_z).unwrap();
    let cert = alpha_linesearch(
        &sys,
        &Multiplier::NormBound { rho: 1.0, n_y: 1 },
        &GammaMode::Diagonal { weights: vec![1.0, 1.0] },
        &[0.2, 0.5, 1.0],
        &SynthesisOptions::default(),
    )
    .unwrap();
    (sys, cert)
}

#[test]
fn norm_bound_loops_stay_within_the_bound() {
    for seed in 0..4 {
        let (sys, cert) = uncertain_loop(400 + seed);
        assert!(check_iqc(&sys, &cert).pass);
        assert!(cert.tau.unwrap() >= 0.0);
        let mut rng = common::rng(500 + seed);
        for _ in 0..5 {
            let delta: f64 = rng.gen_range(-1.0..1.0);
            let bd = sys.b.columns(0, 1) * delta * sys.c.rows(0, 1);
            let acl = &sys.a + bd;
            let b_d = sys.b.columns(1, 1).into_owned();
            let h = 0.05;
            // exact ∫ e^{-2α(h-τ)} ‖[w_Δ; d]‖²_Γ over each step, as a
            // quadratic form in the step's start state and held d
            let mut f = DMatrix::zeros(5, 5);
            f.view_mut((0, 0), (4, 4)).copy_from(&acl);
            f.view_mut((0, 4), (4, 1)).copy_from(&b_d);
            let wd = sys.c.rows(0, 1) * delta;
            let mut g = DMatrix::zeros(5, 5);
            g.view_mut((0, 0), (4, 4)).copy_from(&(wd.transpose() * &wd * cert.gamma_weights[0]));
            g[(4, 4)] = cert.gamma_weights[1];
            let w = common::weighted_quadratic_integral(&f, &g, 2.0 * cert.alpha, h);
            let phi = (&f * h).exp();
            let mut xi = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
            let mut bound = cert.storage(&xi);
            for _ in 0..400 {
                let mut s = DVector::zeros(5);
                s.rows_mut(0, 4).copy_from(&xi);
                s[4] = rng.gen_range(-1.0..1.0);
                bound = (-2.0 * cert.alpha * h).exp() * bound + (s.transpose() * &w * &s)[(0, 0)];
                xi = (&phi * &s).rows(0, 4).into_owned();
                let z = (&sys.c_z * &xi).norm();
                assert!(z <= cert.output_bound(bound) * (1.0 + 1e-9) + 1e-9, "{z} > {}", cert.output_bound(bound));
                assert!(cert.storage(&xi) <= bound * (1.0 + 1e-9) + 1e-12);
            }
        }
    }
}
