//! Properties of the simulated system and of the reservoir as a dynamical
//! system.

mod common;

use esn_adjoint::dynsys::{lyapunov_time, IntegrationConfig, LorenzParams};
use esn_adjoint::esn::{build_reservoir, EsnHyperParams, RegimeParams};
use esn_adjoint::linalg::{spectral_radius, PowerIteration};
use nalgebra::DVector;

#[test]
fn reference_lyapunov_time_and_reproducibility() {
    let a = lyapunov_time(LorenzParams::reference(), IntegrationConfig::lyapunov_default(), 4).unwrap();
    let b = lyapunov_time(LorenzParams::reference(), IntegrationConfig::lyapunov_default(), 4).unwrap();
    assert_eq!(a, b);
    let lt = a.lyapunov_time.unwrap();
    assert!((lt - 1.1).abs() < 0.11, "lyapunov time {lt}");

    // another initial condition lands on the same exponent
    let c = lyapunov_time(LorenzParams::reference(), IntegrationConfig::lyapunov_default(), 9).unwrap();
    assert!((c.lambda_max - a.lambda_max).abs() < 0.05 * a.lambda_max);
}

#[test]
fn large_reservoir_radius_matches_dense_eigenvalues() {
    let hyper = EsnHyperParams { n_reservoir: 1200, rho: 0.8, ..common::hyper(1200) };
    let mats = build_reservoir(&hyper, 3, 3).unwrap();
    let dense = mats.w.to_dense().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
    assert!((dense - 0.8).abs() < 1e-6, "dense radius {dense}");
    let iterated = spectral_radius(&mats.w, PowerIteration::default()).unwrap();
    assert!((iterated - dense).abs() < 1e-6 * dense);
    for row in 0..1200 {
        assert_eq!(mats.w.row_nnz(row), 3);
        assert_eq!(mats.w_in.row_nnz(row), 1);
    }
}

#[test]
fn washout_forgets_the_initial_reservoir_state() {
    let esn = common::trained(100);
    let p = RegimeParams::from(LorenzParams::reference());
    let inputs: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let t = i as f64 * 0.01;
            vec![8.0 * (1.3 * t).sin(), 9.0 * (0.7 * t).cos(), 24.0 + 8.0 * (0.9 * t).sin()]
        })
        .collect();
    let r_a = esn.open_loop(&DVector::zeros(100), &inputs, &p).unwrap();
    let r_b = esn.open_loop(&DVector::from_element(100, 0.9), &inputs, &p).unwrap();
    let gap = |k: usize| (&r_a[k] - &r_b[k]).amax();
    assert!(gap(399) < 1e-8 * gap(0), "gap {} -> {}", gap(0), gap(399));
    assert!(gap(20) < gap(0) && gap(100) < gap(20));
}
