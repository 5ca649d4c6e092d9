//! Climate sensitivity of z-bar at (10, 28, 8/3): ensemble adjoint of the
//! true system and of a trained ESN over 0.5-LT windows, next to the direct
//! estimate from a quadratic fit of z-bar along r.
//!
//! ```text
//! cargo run --release --example ensemble_sensitivity -- 500
//! ```

use esn_adjoint::adjoint::ObjectiveSpec;
use esn_adjoint::dynsys::{lyapunov_time, IntegrationConfig, LorenzParams, DEFAULT_DT};
use esn_adjoint::ensemble::{
    ensemble_adjoint, polyfit_direct, sweep_objective, EnsembleConfig, MemberInit, SweepSettings, System,
};

mod common;

fn main() -> esn_adjoint::Result<()> {
    let n_members: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let esn = common::trained(300)?;
    let reference = LorenzParams::reference();
    let lt = lyapunov_time(reference, IntegrationConfig::lyapunov_default(), 1)?.lyapunov_time.unwrap_or(1.1);
    let config = EnsembleConfig::new(n_members, 0.5, 11);
    let objective = ObjectiveSpec::default();

    let systems = [System::True, System::Esn { model: &esn, init: MemberInit::default() }];
    println!("{n_members} members, windows of 0.5 LT = {} steps", config.window_steps(lt));
    println!("{:>6} {:>20} {:>20} {:>20} {:>9}", "", "dz/ds", "dz/dr", "dz/db", "diverged");
    for system in &systems {
        let e = ensemble_adjoint(system, reference, lt, &config, objective)?;
        let cells: Vec<String> = (0..3).map(|j| format!("{:.4} +- {:.4}", e.mean[j], e.stderr[j])).collect();
        println!("{:>6} {:>20} {:>20} {:>20} {:>9}", system.tag(), cells[0], cells[1], cells[2], e.n_diverged);
    }

    let grid = [24.0, 26.0, 28.0, 30.0, 32.0];
    let settings = SweepSettings { duration_lt: 200.0, dt: DEFAULT_DT, seed: 3, washout_steps: 400 };
    let sweep = sweep_objective(reference, 1, &grid, &System::True, &settings, objective)?;
    let (fit, slopes) = polyfit_direct(&sweep, 2)?;
    for (p, s) in sweep.points.iter().zip(&slopes) {
        println!(
            "r = {:>4}: z-bar {:>8.3}  fit {:>8.3}  slope {:.4}",
            p.value,
            p.objective.unwrap_or(f64::NAN),
            fit.eval(p.value),
            s
        );
    }
    println!("direct estimate of dz/dr at r = 28: {:.4}", fit.derivative(28.0));
    Ok(())
}
