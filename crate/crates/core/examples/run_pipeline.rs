//! Runs every pipeline command in order on one config, the same sequence as
//! the CLI. Defaults to the smoke config, which finishes in seconds.
//!
//! ```text
//! cargo run --release --example run_pipeline -- configs/desk.json runs/desk
//! ```

use std::path::PathBuf;

use esn_adjoint::pipeline::{run, Command, RunConfig, RunManifest};

fn main() -> esn_adjoint::Result<()> {
    let mut args = std::env::args_os().skip(1).map(PathBuf::from);
    let config_path =
        args.next().unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json")));
    let out = args.next().unwrap_or_else(|| PathBuf::from("runs/example"));
    let config = RunConfig::load(&config_path)?;

    for command in
        [Command::Generate, Command::Search, Command::Predict, Command::Stats, Command::Sensitivity, Command::Compare]
    {
        let t = std::time::Instant::now();
        let outputs = run(command, &config, &out)?;
        println!("{:<12} {:>7.1}s  {} files", command.name(), t.elapsed().as_secs_f64(), outputs.len());
    }
    let manifest = RunManifest::load(&out)?;
    for path in manifest.outputs() {
        println!("  {path}");
    }
    Ok(())
}
