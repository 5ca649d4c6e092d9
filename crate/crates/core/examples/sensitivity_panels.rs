//! dz-bar/dp along the three one-parameter panels through the reference
//! regime, from true-system and ESN ensembles. Member count defaults to 100;
//! error bars shrink like 1/sqrt(n).
//!
//! ```text
//! cargo run --release --example sensitivity_panels -- 100
//! ```

use esn_adjoint::adjoint::ObjectiveSpec;
use esn_adjoint::dynsys::{lyapunov_time, IntegrationConfig, LorenzParams, PARAM_NAMES};
use esn_adjoint::ensemble::{ensemble_adjoint, EnsembleConfig, MemberInit, System};

mod common;

const PANELS: [[f64; 5]; 3] =
    [[8.0, 10.0, 12.0, 14.0, 16.0], [30.0, 35.0, 40.0, 45.0, 50.0], [1.5, 2.0, 2.5, 8.0 / 3.0, 3.0]];

fn main() -> esn_adjoint::Result<()> {
    let n_members: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let esn = common::trained(300)?;
    let base = LorenzParams::reference();
    let config = EnsembleConfig::new(n_members, 0.5, 5);
    let objective = ObjectiveSpec::default();
    let esn_system = System::Esn { model: &esn, init: MemberInit::default() };

    for (j, grid) in PANELS.iter().enumerate() {
        println!("dz/d{} along {}", PARAM_NAMES[j], PARAM_NAMES[j]);
        for &v in grid {
            let regime = base.with_component(j, v)?;
            let Some(lt) = lyapunov_time(regime, IntegrationConfig::lyapunov_default(), 1)?.lyapunov_time else {
                println!("  {v:>7.3}: not chaotic");
                continue;
            };
            let t = ensemble_adjoint(&System::True, regime, lt, &config, objective)?;
            let e = ensemble_adjoint(&esn_system, regime, lt, &config, objective)?;
            println!(
                "  {v:>7.3}: true {:>8.4} +- {:.4}   esn {:>8.4} +- {:.4}",
                t.mean[j], t.stderr[j], e.mean[j], e.stderr[j]
            );
        }
    }
    Ok(())
}
