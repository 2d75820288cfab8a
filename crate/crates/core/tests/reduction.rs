mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use romtube::benchmark::{build_chain, ChainParams};
use romtube::lti::{simulate, spectral_abscissa, LtiSystem, SampledSignal};
use romtube::reduction::{
    error_dynamics, modal_lumped_projection, orthonormalize, petrov_galerkin_reduce, reconstruct_full_output, LumpedBasis,
};

fn benchmark_rom() -> (LtiSystem, romtube::reduction::ReducedModel) {
    let sys = build_chain(&ChainParams::default(), false).unwrap();
    let (v, w) = modal_lumped_projection(&sys, 6, LumpedBasis::RigidBody).unwrap();
    let rom = petrov_galerkin_reduce(&sys, &v, &w).unwrap();
    (sys, rom)
}

#[test]
fn benchmark_rom_keeps_the_slow_modes() {
    let (sys, rom) = benchmark_rom();
    assert_eq!(rom.a_r.shape(), (8, 8));
    let full = spectral_abscissa(&sys.a).unwrap();
    let reduced = spectral_abscissa(&rom.a_r).unwrap();
    assert!(reduced >= full - 1e-9 * full.abs(), "{reduced} vs {full}");
    let wv = rom.w.transpose() * &rom.v;
    assert!((wv - DMatrix::identity(8, 8)).amax() < 1e-12);
}

#[test]
fn benchmark_error_input_has_no_disturbance_block() {
    let (sys, rom) = benchmark_rom();
    let err = error_dynamics(&sys, &rom).unwrap();
    assert_eq!(err.b_e.shape(), (100, 9));
    assert_eq!((err.n_w, err.n_r, err.n_u), (0, 8, 1));
}

#[test]
fn full_projection_leaves_only_the_disturbance() {
    let mut rng = common::rng(1);
    let sys = common::random_system(&mut rng, 5, 1, 1, 1);
    let eye = DMatrix::identity(5, 5);
    let rom = petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    assert!((err.b_e.columns(0, 1) - &sys.e).amax() < 1e-14);
    assert!(err.b_e.columns(1, 6).amax() < 1e-14);
    assert!(err.e0.amax() < 1e-14);
}

#[test]
fn invariant_subspace_gives_zero_error() {
    let mut rng = common::rng(2);
    let s = common::gaussian_matrix(&mut rng, 6, 6) + DMatrix::identity(6, 6) * 3.0;
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, -0.7, -1.1, -1.6, -2.0, -2.5]));
    let a = &s * d * s.clone().try_inverse().unwrap();
    let v = orthonormalize(&s.columns(0, 2).into_owned()).unwrap();
    let x0 = &v * DVector::from_vec(vec![0.8, -0.4]);
    let sys = LtiSystem::new(a, DMatrix::zeros(6, 1), DMatrix::zeros(6, 0), common::gaussian_matrix(&mut rng, 1, 6), x0)
        .unwrap();
    let rom = petrov_galerkin_reduce(&sys, &v, &v).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    let u = SampledSignal::zeros(0.0, 0.5, 1, 20).unwrap();
    let rec = reconstruct_full_output(&sys, &rom, &err, &u, None, 0.5).unwrap();
    assert!(rec.e.amax() < 1e-10, "{}", rec.e.amax());
    assert!(rec.z_e.amax() < 1e-10);
}

#[test]
fn zero_data_gives_zero_output() {
    let (sys, rom) = benchmark_rom();
    let err = error_dynamics(&sys, &rom).unwrap();
    let u = SampledSignal::zeros(0.0, 2.0, 1, 10).unwrap();
    let rec = reconstruct_full_output(&sys, &rom, &err, &u, None, 1.0).unwrap();
    assert_eq!(rec.z().amax(), 0.0);
}

#[test]
fn benchmark_reconstruction_matches_direct_simulation() {
    let (sys, rom) = benchmark_rom();
    let err = error_dynamics(&sys, &rom).unwrap();
    let mut rng = common::rng(3);
    let u = common::random_signal(&mut rng, 1, 150, 2.0, 100.0);
    let rec = reconstruct_full_output(&sys, &rom, &err, &u, None, 0.5).unwrap();
    let direct = simulate(&sys, &u, None, 0.5).unwrap();
    let peak = direct.z.values.amax();
    assert!((rec.z() - &direct.z.values).amax() <= 1e-8 * (1.0 + peak));
}

#[test]
fn single_mass_without_truncation_has_no_error() {
    let p = ChainParams { n_masses: 1, ..Default::default() };
    let sys = build_chain(&p, false).unwrap();
    let (v, w) = modal_lumped_projection(&sys, 2, LumpedBasis::None).unwrap();
    let rom = petrov_galerkin_reduce(&sys, &v, &w).unwrap();
    let err = error_dynamics(&sys, &rom).unwrap();
    let u = SampledSignal::constant(0.0, 1.0, 20, &[1.0]).unwrap();
    let rec = reconstruct_full_output(&sys, &rom, &err, &u, None, 0.5).unwrap();
    assert!(rec.z_e.amax() < 1e-12);
}

#[test]
fn error_state_is_the_projection_residual() {
    for seed in 0..10 {
        let mut rng = common::rng(100 + seed);
        let n = rng.gen_range(4..=12);
        let sys = common::random_system(&mut rng, n, 1, 1, 1);
        let (v, w) = common::random_projection(&mut rng, n, n / 2);
        let rom = petrov_galerkin_reduce(&sys, &v, &w).unwrap();
        let err = error_dynamics(&sys, &rom).unwrap();
        let u = common::random_signal(&mut rng, 1, 15, 0.4, 1.0);
        let wd = common::random_signal(&mut rng, 1, 15, 0.4, 1.0);
        let rec = reconstruct_full_output(&sys, &rom, &err, &u, Some(&wd), 0.2).unwrap();
        let direct = simulate(&sys, &u, Some(&wd), 0.2).unwrap();
        let residual = &direct.x.values - &v * &rec.x_r;
        let scale = 1.0 + direct.x.values.amax();
        assert!((residual - &rec.e).amax() <= 1e-8 * scale);

        let pi = rom.residual_projector();
        assert!((&pi * &pi - &pi).amax() < 1e-10);
    }
}
