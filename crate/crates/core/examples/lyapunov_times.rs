//! Leading Lyapunov exponent of the reference regime and of every point of
//! the training grid.
//!
//! ```text
//! cargo run --release --example lyapunov_times
//! ```

use esn_adjoint::dynsys::{lyapunov_time, IntegrationConfig, LorenzParams};
use esn_adjoint::pipeline::Grid;
use rayon::prelude::*;

fn main() -> esn_adjoint::Result<()> {
    let config = IntegrationConfig::lyapunov_default();
    let reference = lyapunov_time(LorenzParams::reference(), config, 0)?;
    println!(
        "reference (10, 28, 8/3): lambda = {:.4}, LT = {:.3}",
        reference.lambda_max,
        reference.lyapunov_time.unwrap_or(f64::NAN)
    );

    let points = Grid::lorenz_default().points();
    let estimates = points
        .par_iter()
        .enumerate()
        .map(|(k, p)| lyapunov_time(LorenzParams::from_array(*p)?, config, k as u64))
        .collect::<esn_adjoint::Result<Vec<_>>>()?;

    println!("{:>5} {:>5} {:>5} {:>9} {:>8}", "s", "r", "b", "lambda", "LT");
    let mut chaotic = Vec::new();
    for (p, e) in points.iter().zip(&estimates) {
        match e.lyapunov_time {
            Some(lt) => {
                chaotic.push(lt);
                println!("{:>5} {:>5} {:>5} {:>9.4} {:>8.3}", p[0], p[1], p[2], e.lambda_max, lt);
            }
            None => println!("{:>5} {:>5} {:>5} {:>9.4} {:>8}", p[0], p[1], p[2], e.lambda_max, "-"),
        }
    }
    let (lo, hi) = chaotic.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{} of {} regimes chaotic, LT in [{lo:.3}, {hi:.3}]", chaotic.len(), points.len());
    Ok(())
}
