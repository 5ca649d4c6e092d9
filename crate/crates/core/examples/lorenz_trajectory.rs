//! Integrates the reference Lorenz regime with RK4 and prints the time
//! averages. Pass a path to also write the trajectory as CSV.
//!
//! ```text
//! cargo run --release --example lorenz_trajectory -- /tmp/lorenz.csv
//! ```

use std::path::PathBuf;

use esn_adjoint::dynsys::{random_initial_state, simulate, steps_for, IntegrationConfig, LorenzParams, DEFAULT_DT};

fn main() -> esn_adjoint::Result<()> {
    let params = LorenzParams::reference();
    let config = IntegrationConfig::new(DEFAULT_DT, steps_for(100.0, DEFAULT_DT), steps_for(20.0, DEFAULT_DT))?;
    let traj = simulate(params, random_initial_state(7), config)?;

    for (c, name) in ["x", "y", "z"].iter().enumerate() {
        let v = traj.component(c);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        println!("{name}: mean {mean:8.3}  range [{lo:8.3}, {hi:8.3}]");
    }
    println!("{} samples over {:.1} time units", traj.len(), traj.time(traj.len() - 1) - traj.time(0));

    if let Some(path) = std::env::args_os().nth(1).map(PathBuf::from) {
        traj.save_csv(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
