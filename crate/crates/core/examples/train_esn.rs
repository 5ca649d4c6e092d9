//! Trains a parameter-aware ESN on a handful of Lorenz regimes and measures
//! its predictability horizon on the unseen reference regime.
//!
//! ```text
//! cargo run --release --example train_esn -- /tmp/model.pesn
//! ```

use std::path::PathBuf;

use esn_adjoint::dynsys::{lyapunov_time, sample_attractor_with_history, IntegrationConfig, LorenzParams, DEFAULT_DT};
use esn_adjoint::esn::{mean_predictability_horizon, Esn, RegimeParams};

mod common;

fn main() -> esn_adjoint::Result<()> {
    let data = common::training_data()?;
    let mut esn = Esn::new(common::hyper(300), 3, 3)?;
    let report = esn.train(&data)?;
    println!(
        "trained on {} samples: one-step rmse {:.3e}, normal-equation residual {:.1e}",
        report.n_samples, report.train_rmse, report.normal_residual
    );

    let reference = LorenzParams::reference();
    let lt = lyapunov_time(reference, IntegrationConfig::lyapunov_default(), 1)?.lyapunov_time.unwrap_or(1.1);
    let washout = 400;
    let forecast = (8.0 * lt / DEFAULT_DT).round() as usize;
    let truths: Vec<Vec<Vec<f64>>> =
        sample_attractor_with_history(reference, 10, 20.0, washout + forecast, DEFAULT_DT, 99)?
            .into_iter()
            .map(|s| {
                // the history leads up to the sample: first washout, then the forecast window
                s.history.iter().map(|x| x.to_vec()).collect()
            })
            .collect();
    let h = mean_predictability_horizon(&esn, &RegimeParams::from(reference), &truths, washout, DEFAULT_DT, lt, 0.5)?;
    println!("reference regime (unseen): LT = {lt:.3}, mean horizon over 10 ICs = {h:.2} LT");

    if let Some(path) = std::env::args_os().nth(1).map(PathBuf::from) {
        esn.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
