#![allow(dead_code)]

use esn_adjoint::dynsys::{sample_attractor_with_history, LorenzParams, DEFAULT_DT};
use esn_adjoint::esn::{Esn, EsnHyperParams, RegimeParams, ReservoirState};
use esn_adjoint::pipeline::simulate_dataset;

pub fn hyper(n_reservoir: usize) -> EsnHyperParams {
    EsnHyperParams {
        n_reservoir,
        n_conn: 3,
        rho: 0.7,
        sigma_in: 0.9,
        alpha: 0.9,
        tikhonov: 1e-4,
        sigma_p: vec![0.15, 0.02, 0.3],
        k_p: vec![30.0, 80.0, 40.0],
        seed: 5,
    }
}

/// Small network trained on four regimes around the reference one.
pub fn trained(n_reservoir: usize) -> Esn {
    let data: Vec<_> = [[9.0, 30.0, 2.5], [11.0, 35.0, 3.0], [12.0, 40.0, 2.0], [10.0, 45.0, 2.5]]
        .iter()
        .enumerate()
        .map(|(k, p)| simulate_dataset(LorenzParams::from_array(*p).unwrap(), k as u64, DEFAULT_DT, 2.0, 6.0).unwrap())
        .collect();
    let mut esn = Esn::new(hyper(n_reservoir), 3, 3).unwrap();
    esn.train(&data).unwrap();
    esn
}

/// Reservoir state synchronized to a reference-regime attractor point.
pub fn synced_state(esn: &Esn, seed: u64) -> (ReservoirState, RegimeParams) {
    let p = RegimeParams::from(LorenzParams::reference());
    let sample =
        sample_attractor_with_history(LorenzParams::reference(), 1, 1.0, 300, DEFAULT_DT, seed).unwrap().remove(0);
    let history: Vec<Vec<f64>> = sample.history.iter().map(|x| x.to_vec()).collect();
    (esn.washout(&history, &p).unwrap(), p)
}

pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
