//! Closed-loop forecast against the truth and long-run z histograms for the
//! reference regime and for (13, 52, 2), written as CSV for plotting.
//!
//! ```text
//! cargo run --release --example forecast_statistics -- /tmp/forecasts
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use esn_adjoint::dynsys::{
    lyapunov_time, sample_attractor_with_history, simulate, steps_for, IntegrationConfig, LorenzParams, DEFAULT_DT,
};
use esn_adjoint::esn::{
    long_term_stats, predictability_horizon, Histogram, LongTermConfig, RegimeParams, WashoutProtocol,
};

mod common;

fn main() -> esn_adjoint::Result<()> {
    let out = std::env::args_os().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("forecasts"));
    std::fs::create_dir_all(&out)?;
    let esn = common::trained(300)?;
    let washout = 400;

    for (name, p) in [("i", [10.0, 28.0, 8.0 / 3.0]), ("ii", [13.0, 52.0, 2.0])] {
        let params = LorenzParams::from_array(p)?;
        let regime = RegimeParams::from(params);
        let lt = lyapunov_time(params, IntegrationConfig::lyapunov_default(), 1)?.lyapunov_time.unwrap_or(1.0);

        let forecast = (5.0 * lt / DEFAULT_DT).round() as usize;
        let sample = sample_attractor_with_history(params, 1, 1.0, washout + forecast, DEFAULT_DT, 17)?.remove(0);
        let truth: Vec<Vec<f64>> = sample.history.iter().map(|x| x.to_vec()).collect();
        let h = predictability_horizon(&esn, &regime, &truth, washout, DEFAULT_DT, lt, 0.5)?;
        let r0 = esn.washout(&truth[..washout], &regime)?;
        let mut pred = vec![esn.readout(&r0)?];
        pred.extend(esn.closed_loop(&r0, forecast - 1, &regime)?.outputs);

        let mut w = BufWriter::new(File::create(out.join(format!("forecast_{name}.csv")))?);
        writeln!(w, "t_lt,x,y,z,x_esn,y_esn,z_esn")?;
        for (i, (y, q)) in truth[washout..].iter().zip(&pred).enumerate() {
            writeln!(w, "{},{},{},{},{},{},{}", i as f64 * DEFAULT_DT / lt, y[0], y[1], y[2], q[0], q[1], q[2])?;
        }
        w.flush()?;

        // long-run z statistics over 200 LT for both systems on a shared range
        let n = steps_for(200.0 * lt, DEFAULT_DT);
        let traj = simulate(params, sample.state, IntegrationConfig::new(DEFAULT_DT, n, 0)?)?;
        let z_true = traj.component(2);
        let range = (0.0, 1.6 * p[1]);
        let config = LongTermConfig {
            duration_lt: 200.0,
            lyapunov_time: lt,
            dt: DEFAULT_DT,
            transient_steps: 0,
            bins: 40,
            ranges: Some(vec![(-0.8 * p[1], 0.8 * p[1]), (-0.8 * p[1], 0.8 * p[1]), range]),
        };
        let stats = long_term_stats(&esn, &regime, &config, &WashoutProtocol::TrueSeries(truth[..washout].to_vec()))?;
        let hist_true = Histogram::from_samples(&z_true, range.0, range.1, 40);
        let hist_esn = &stats.histograms[2];

        let mut w = BufWriter::new(File::create(out.join(format!("z_histogram_{name}.csv")))?);
        writeln!(w, "z,true,esn")?;
        for ((c, a), b) in hist_true.bin_centers().iter().zip(&hist_true.mass).zip(&hist_esn.mass) {
            writeln!(w, "{c},{a},{b}")?;
        }
        w.flush()?;

        let z_mean = z_true.iter().sum::<f64>() / z_true.len() as f64;
        println!(
            "regime ({name}) {p:?}: LT {lt:.3}, horizon {h:.2} LT, mean z true {z_mean:.3} esn {:.3}",
            stats.mean[2]
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
