//! Seeded random search with local refinement, scored by closed-loop error
//! on held-out regimes. A small budget on a 150-unit reservoir keeps this
//! quick; the desk config runs the same search at 300 units and 50
//! candidates.
//!
//! ```text
//! cargo run --release --example hyperparameter_search
//! ```

use esn_adjoint::dynsys::{lyapunov_time, IntegrationConfig, LorenzParams, DEFAULT_DT};
use esn_adjoint::hyperopt::{search, Refinement, SearchSpace, ValidationSettings};
use esn_adjoint::pipeline::simulate_dataset;
use rayon::prelude::*;

fn datasets(points: &[[f64; 3]], seed: u64) -> esn_adjoint::Result<Vec<esn_adjoint::esn::RegimeDataset>> {
    points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let params = LorenzParams::from_array(*p)?;
            let mut ds = simulate_dataset(params, seed + k as u64, DEFAULT_DT, 4.0, 10.0)?;
            ds.lyapunov_time = lyapunov_time(params, IntegrationConfig::lyapunov_default(), k as u64)?.lyapunov_time;
            Ok(ds)
        })
        .collect()
}

fn main() -> esn_adjoint::Result<()> {
    let train = datasets(
        &[
            [8.0, 35.0, 2.0],
            [10.0, 30.0, 3.0],
            [12.0, 45.0, 2.5],
            [14.0, 35.0, 3.0],
            [16.0, 40.0, 2.0],
            [12.0, 50.0, 1.5],
        ],
        0,
    )?;
    let validation = datasets(&[[10.0, 40.0, 3.0], [14.0, 45.0, 2.0]], 100)?;

    let space = SearchSpace {
        n_reservoir: 150,
        budget: 12,
        refine: Some(Refinement { budget: 4, top_k: 2, width: 0.05 }),
        ..SearchSpace::lorenz_default()
    };
    let outcome = search(&space, &train, &validation, &ValidationSettings::default(), 42)?;

    println!("{:>4} {:>9} {:>7} {:>7} {:>6} {:>9}", "cand", "score", "rho", "s_in", "alpha", "lambda");
    for r in &outcome.history {
        let h = &r.hyper;
        let score = r.score.map_or("failed".to_string(), |s| format!("{s:.4}"));
        println!(
            "{:>4} {:>9} {:>7.3} {:>7.3} {:>6.3} {:>9.2e}",
            r.candidate_index, score, h.rho, h.sigma_in, h.alpha, h.tikhonov
        );
    }
    println!("winner: candidate {} (score {:.4})", outcome.best_index, outcome.best_score);
    println!("{}", serde_json::to_string_pretty(&outcome.best)?);
    Ok(())
}
