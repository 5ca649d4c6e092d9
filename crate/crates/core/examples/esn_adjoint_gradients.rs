//! Sensitivity of the window-averaged z of a trained ESN to (s, r, b) by the
//! discrete adjoint, the forward tangent and central finite differences on
//! the same closed-loop window, then the growth of the adjoint over a long
//! window.
//!
//! ```text
//! cargo run --release --example esn_adjoint_gradients
//! ```

use std::time::Instant;

use esn_adjoint::adjoint::{
    adjoint_sweep, adjoint_sweep_capped, finite_diff_sensitivity, tangent_sweep, ObjectiveSpec,
};
use esn_adjoint::dynsys::{lyapunov_time, sample_attractor_with_history, IntegrationConfig, LorenzParams, DEFAULT_DT};
use esn_adjoint::esn::RegimeParams;

mod common;

fn main() -> esn_adjoint::Result<()> {
    let esn = common::trained(200)?;
    let reference = LorenzParams::reference();
    let p = RegimeParams::from(reference);
    let lt = lyapunov_time(reference, IntegrationConfig::lyapunov_default(), 1)?.lyapunov_time.unwrap_or(1.1);
    let objective = ObjectiveSpec::default();

    let sample = sample_attractor_with_history(reference, 1, 1.0, 400, DEFAULT_DT, 5)?.remove(0);
    let history: Vec<Vec<f64>> = sample.history.iter().map(|x| x.to_vec()).collect();
    let r0 = esn.washout(&history, &p)?;

    let n = (0.5 * lt / DEFAULT_DT).round() as usize;
    let traj = esn.closed_loop(&r0, n, &p)?.trajectory;

    let t = Instant::now();
    let adjoint = adjoint_sweep(&esn, &traj, objective)?;
    let t_adj = t.elapsed();
    let t = Instant::now();
    let tangent = tangent_sweep(&esn, &traj, objective)?;
    let t_tan = t.elapsed();
    let fd = finite_diff_sensitivity(&esn, &r0, &p, n, objective, 1e-5)?;

    println!("window of {n} steps (0.5 LT) at (10, 28, 8/3)");
    println!("{:>16} {:>12} {:>12} {:>12}", "", "dz/ds", "dz/dr", "dz/db");
    for (name, v) in [("adjoint", &adjoint.sensitivity.djdp), ("tangent", &tangent.djdp), ("finite diff", &fd.djdp)] {
        println!("{name:>16} {:>12.6} {:>12.6} {:>12.6}", v[0], v[1], v[2]);
    }
    println!("adjoint {:?}, tangent {:?}", t_adj, t_tan);

    // over long windows the adjoint grows like exp(lambda * T)
    let long = (10.0 * lt / DEFAULT_DT).round() as usize;
    let traj = esn.closed_loop(&r0, long, &p)?.trajectory;
    let norms = adjoint_sweep_capped(&esn, &traj, objective, f64::INFINITY)?.adjoint_norms();
    let terminal = norms[norms.len() - 1];
    for k in 0..=10 {
        let i = (k * (norms.len() - 1)) / 10;
        println!("t = {:>5.2} LT   |q| / |q(T)| = {:.3e}", i as f64 * DEFAULT_DT / lt, norms[i] / terminal);
    }
    Ok(())
}
