//! Training set and hyperparameters shared by the examples.

#![allow(dead_code)]

use esn_adjoint::dynsys::{LorenzParams, DEFAULT_DT};
use esn_adjoint::esn::{Esn, EsnHyperParams, RegimeDataset};
use esn_adjoint::pipeline::simulate_dataset;
use rayon::prelude::*;

pub const TRAIN: [[f64; 3]; 8] = [
    [8.0, 35.0, 2.0],
    [10.0, 30.0, 3.0],
    [12.0, 45.0, 2.5],
    [14.0, 35.0, 3.0],
    [16.0, 40.0, 2.0],
    [10.0, 50.0, 2.0],
    [12.0, 30.0, 2.5],
    [14.0, 45.0, 1.5],
];

pub fn hyper(n_reservoir: usize) -> EsnHyperParams {
    EsnHyperParams {
        n_reservoir,
        n_conn: 3,
        rho: 0.72,
        sigma_in: 0.95,
        alpha: 0.95,
        tikhonov: 3e-4,
        sigma_p: vec![0.15, 0.02, 0.28],
        k_p: vec![33.6, 80.9, 49.5],
        seed: 2,
    }
}

pub fn training_data() -> esn_adjoint::Result<Vec<RegimeDataset>> {
    TRAIN
        .par_iter()
        .enumerate()
        .map(|(k, p)| simulate_dataset(LorenzParams::from_array(*p)?, k as u64, DEFAULT_DT, 4.0, 10.0))
        .collect()
}

pub fn trained(n_reservoir: usize) -> esn_adjoint::Result<Esn> {
    let mut esn = Esn::new(hyper(n_reservoir), 3, 3)?;
    esn.train(&training_data()?)?;
    Ok(esn)
}
