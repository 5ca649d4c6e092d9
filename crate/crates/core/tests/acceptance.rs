//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! The pipeline criteria (6 to 8, and 10) run the CLI verbs on
//! `configs/desk.json` in a temporary directory; set
//! `ESN_ADJOINT_ACCEPTANCE_CONFIG` to use another config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use esn_adjoint::adjoint::{
    adjoint_sweep, adjoint_sweep_capped, esn_param_grad, esn_step_jacobian, finite_diff_sensitivity, tangent_sweep,
    ObjectiveSpec,
};
use esn_adjoint::dynsys::{
    lorenz_jacobian, lorenz_param_grad, lorenz_rhs, lyapunov_time, rk4_step, sample_attractor_with_history,
    IntegrationConfig, LorenzParams, LorenzState,
};
use esn_adjoint::esn::{Esn, RegimeParams, ReservoirState, ReservoirTrajectory};
use esn_adjoint::pipeline::{
    self, read_csv, BiasRow, Command, ComparisonCsvRow, HorizonSummaryRow, RegimeRow, RunConfig, StatsRow, MODEL_FILE,
};
use esn_adjoint::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REGIME_I: [f64; 3] = [10.0, 28.0, 8.0 / 3.0];
const REGIME_II: [f64; 3] = [13.0, 52.0, 2.0];

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Result<Check> {
    Ok(Check { pass, detail })
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn matrix_rel(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    let scale = analytic.amax().max(fd.amax());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - fd).amax() / scale
    }
}

fn run_pipeline(config: &RunConfig, out: &Path) -> Result<f64> {
    let start = Instant::now();
    for command in
        [Command::Generate, Command::Search, Command::Predict, Command::Stats, Command::Sensitivity, Command::Compare]
    {
        let t = Instant::now();
        pipeline::run(command, config, out)?;
        println!("  {:<12} {:>7.1}s", command.name(), t.elapsed().as_secs_f64());
    }
    Ok(start.elapsed().as_secs_f64())
}

// ------------------------------------------------------------------ 1

fn closed_loop_step(esn: &Esn, r: &ReservoirState, p: &RegimeParams) -> Result<ReservoirState> {
    Ok(esn.closed_loop(r, 1, p)?.trajectory.states[1].clone())
}

fn criterion_1(esn: &Esn) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let p =
            LorenzParams::new(rng.random_range(8.0..16.0), rng.random_range(25.0..52.0), rng.random_range(1.0..3.0))?;
        let x = LorenzState::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(0.0..50.0),
        )?;

        let h = 1e-5;
        let j = DMatrix::from_fn(3, 3, |a, b| lorenz_jacobian(x, p).unwrap()[a][b]);
        let mut fd = DMatrix::zeros(3, 3);
        for b in 0..3 {
            let (mut xp, mut xm) = (x.to_array(), x.to_array());
            xp[b] += h;
            xm[b] -= h;
            let (fp, fm) = (lorenz_rhs(LorenzState::from_array(xp)?, p)?, lorenz_rhs(LorenzState::from_array(xm)?, p)?);
            for a in 0..3 {
                fd[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
            }
        }
        worst[0] = worst[0].max(matrix_rel(&j, &fd));

        let g = DMatrix::from_fn(3, 3, |a, b| lorenz_param_grad(x).unwrap()[a][b]);
        for b in 0..3 {
            let (mut pp, mut pm) = (p.to_array(), p.to_array());
            pp[b] += h;
            pm[b] -= h;
            let (fp, fm) =
                (lorenz_rhs(x, LorenzParams::from_array(pp)?)?, lorenz_rhs(x, LorenzParams::from_array(pm)?)?);
            for a in 0..3 {
                fd[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
            }
        }
        worst[1] = worst[1].max(matrix_rel(&g, &fd));
    }

    // ESN points: states visited by short closed-loop runs at random regimes
    let n_r = esn.n_reservoir();
    for k in 0..50u64 {
        let p = RegimeParams::new(vec![
            rng.random_range(8.0..16.0),
            rng.random_range(25.0..52.0),
            rng.random_range(1.0..3.0),
        ])?;
        let lp = LorenzParams::from_array([p.p[0], p.p[1], p.p[2]])?;
        let sample = sample_attractor_with_history(lp, 1, 1.0, 200, 0.01, 900 + k)?.remove(0);
        let history: Vec<Vec<f64>> = sample.history.iter().map(|s| s.to_vec()).collect();
        let r0 = esn.washout(&history, &p)?;
        let r_i = esn.closed_loop(&r0, rng.random_range(1..40), &p)?.trajectory.states.pop().unwrap();
        let r_next = closed_loop_step(esn, &r_i, &p)?;

        let h = 1e-6;
        let j = esn_step_jacobian(esn, &r_i, &r_next)?;
        let mut fd = DMatrix::zeros(n_r, n_r);
        for b in 0..n_r {
            let (mut rp, mut rm) = (r_i.clone(), r_i.clone());
            rp[b] += h;
            rm[b] -= h;
            let col = (closed_loop_step(esn, &rp, &p)? - closed_loop_step(esn, &rm, &p)?) / (2.0 * h);
            fd.column_mut(b).copy_from(&col);
        }
        worst[2] = worst[2].max(matrix_rel(&j, &fd));

        let h = 1e-4;
        let g = esn_param_grad(esn, &r_i, &r_next)?;
        let mut fd = DMatrix::zeros(n_r, 3);
        for b in 0..3 {
            let col = (closed_loop_step(esn, &r_i, &p.perturbed(b, h))?
                - closed_loop_step(esn, &r_i, &p.perturbed(b, -h))?)
                / (2.0 * h);
            fd.column_mut(b).copy_from(&col);
        }
        worst[3] = worst[3].max(matrix_rel(&g, &fd));
    }
    check(
        worst.iter().all(|w| *w <= 1e-6),
        format!(
            "max rel err: lorenz J {:.1e}, lorenz dF/dp {:.1e}, esn J {:.1e}, esn dr/dp {:.1e} (tol 1e-6)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ------------------------------------------------------------------ 2, 3, 9

fn regime_i_windows(esn: &Esn, n: usize, window_steps: usize, seed: u64) -> Result<Vec<ReservoirTrajectory>> {
    let p = RegimeParams::new(REGIME_I.to_vec())?;
    let samples = sample_attractor_with_history(LorenzParams::reference(), n, 3.0, 400, 0.01, seed)?;
    samples
        .iter()
        .map(|s| {
            let history: Vec<Vec<f64>> = s.history.iter().map(|x| x.to_vec()).collect();
            let r0 = esn.washout(&history, &p)?;
            Ok(esn.closed_loop(&r0, window_steps, &p)?.trajectory)
        })
        .collect()
}

fn lt_steps(lt: f64, fraction: f64) -> usize {
    ((fraction * lt / 0.01).round() as usize).max(1)
}

fn criterion_2(esn: &Esn, lt: f64) -> Result<Check> {
    let mut worst = 0.0f64;
    for traj in regime_i_windows(esn, 20, lt_steps(lt, 1.0), 202)? {
        let a = adjoint_sweep(esn, &traj, ObjectiveSpec::default())?;
        let t = tangent_sweep(esn, &traj, ObjectiveSpec::default())?;
        for (x, y) in a.sensitivity.djdp.iter().zip(&t.djdp) {
            worst = worst.max(rel(*x, *y));
        }
    }
    check(worst <= 1e-10, format!("20 windows of 1 LT, max componentwise rel err {worst:.1e} (tol 1e-10)"))
}

fn criterion_3(esn: &Esn, lt: f64) -> Result<Check> {
    let p = RegimeParams::new(REGIME_I.to_vec())?;
    let n = lt_steps(lt, 0.5);
    let mut worst = 0.0f64;
    for traj in regime_i_windows(esn, 20, n, 303)? {
        let a = adjoint_sweep(esn, &traj, ObjectiveSpec::default())?;
        let fd = finite_diff_sensitivity(esn, &traj.states[0], &p, n, ObjectiveSpec::default(), 1e-5)?;
        for (x, y) in a.sensitivity.djdp.iter().zip(&fd.djdp) {
            worst = worst.max(rel(*x, *y));
        }
    }
    check(worst <= 1e-4, format!("20 windows of 0.5 LT, max componentwise rel err {worst:.1e} (tol 1e-4)"))
}

fn criterion_9(esn: &Esn, lt: f64) -> Result<Check> {
    let traj = regime_i_windows(esn, 1, lt_steps(lt, 10.0), 909)?.remove(0);
    let a = adjoint_sweep_capped(esn, &traj, ObjectiveSpec::default(), f64::INFINITY)?;
    let norms = a.adjoint_norms();
    let terminal = *norms.last().unwrap();
    let peak = norms.iter().cloned().fold(0.0, f64::max);
    let growth = peak / terminal;
    check(growth >= 1e3, format!("10-LT window: max |q| / terminal |q| = {growth:.2e} (need >= 1e3)"))
}

// ------------------------------------------------------------------ 4

fn rk4_end(dt: f64) -> Result<[f64; 3]> {
    let p = LorenzParams::reference().to_array();
    let mut x = [-5.9, -5.5, 24.6];
    let n = (1.0 / dt).round() as usize;
    for _ in 0..n {
        x = rk4_step(
            |s: &[f64; 3]| [p[0] * (s[1] - s[0]), s[0] * (p[1] - s[2]) - s[1], s[0] * s[1] - p[2] * s[2]],
            &x,
            dt,
        )?;
    }
    Ok(x)
}

fn criterion_4() -> Result<Check> {
    let reference = rk4_end(0.0025 / 64.0)?;
    let dts = [0.02, 0.01, 0.005, 0.0025];
    let mut pts = Vec::new();
    for dt in dts {
        let x = rk4_end(dt)?;
        let err = (0..3).map(|c| (x[c] - reference[c]).abs()).fold(0.0, f64::max);
        pts.push((dt.ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    check(slope >= 3.8, format!("fitted slope {slope:.3} over dt 0.02..0.0025 (need >= 3.8)"))
}

// ------------------------------------------------------------------ 5

fn criterion_5(out: &Path, config: &RunConfig) -> Result<Check> {
    let lt = lyapunov_time(LorenzParams::reference(), IntegrationConfig::lyapunov(config.dt), 5)?
        .lyapunov_time
        .unwrap_or(f64::NAN);
    let regimes: Vec<RegimeRow> = read_csv(&out.join("data/regimes.csv"))?;
    let (lo, hi) = (0.77 * 0.85, 4.80 * 1.15);
    let mut bad = Vec::new();
    let mut used = 0;
    for r in &regimes {
        match (r.role.as_str(), r.lyapunov_time) {
            ("rejected", None) => {}
            (_, Some(v)) if (lo..=hi).contains(&v) => used += 1,
            _ => bad.push(format!("{:?}", r.params())),
        }
    }
    let ok_i = (lt - 1.1).abs() <= 0.11;
    check(
        ok_i && bad.is_empty(),
        format!(
            "regime (i) LT {lt:.3} (1.1 +- 10%); {used} drawn regimes in [{lo:.3}, {hi:.2}], {} flagged non-chaotic, out of range: {bad:?}",
            regimes.len() - used - bad.len()
        ),
    )
}

// ------------------------------------------------------------------ 6, 7, 8

fn same_params(a: [f64; 3], b: [f64; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9)
}

fn criterion_6(out: &Path) -> Result<Check> {
    let rows: Vec<HorizonSummaryRow> = read_csv(&out.join("predict/summary.csv"))?;
    let find = |p: [f64; 3]| rows.iter().find(|r| same_params([r.s, r.r, r.b], p));
    let (Some(a), Some(b)) = (find(REGIME_I), find(REGIME_II)) else {
        return check(false, "predict/summary.csv lacks regime (i) or (13, 52, 2)".into());
    };
    check(
        a.mean_horizon_lt >= 2.0
            && b.mean_horizon_lt >= 2.0
            && a.n_initial_conditions >= 20
            && b.n_initial_conditions >= 20,
        format!(
            "mean horizon over {} ICs: regime (i) {:.2} LT, (13, 52, 2) {:.2} LT (need >= 2 each)",
            a.n_initial_conditions, a.mean_horizon_lt, b.mean_horizon_lt
        ),
    )
}

fn criterion_7(out: &Path, config: &RunConfig) -> Result<Check> {
    let rows: Vec<StatsRow> = read_csv(&out.join("stats/summary.csv"))?;
    type Means = (Option<f64>, Option<f64>, [f64; 3]);
    let mut by_regime: BTreeMap<usize, Means> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.component == "z") {
        let e = by_regime.entry(r.regime).or_insert((None, None, [r.s, r.r, r.b]));
        match r.system.as_str() {
            "true" => e.0 = r.mean,
            "esn" if r.status == "ok" => e.1 = r.mean,
            _ => {}
        }
    }
    let mut parts = Vec::new();
    let mut pass = config.stats.duration_lt >= 500.0;
    let mut validation = 0;
    let mut saw_i = false;
    for (t, e, p) in by_regime.values() {
        let err = match (t, e) {
            (Some(t), Some(e)) => (e - t).abs() / t.abs(),
            _ => f64::INFINITY,
        };
        pass &= err <= 0.05;
        if same_params(*p, REGIME_I) {
            saw_i = true;
        } else {
            validation += 1;
        }
        parts.push(format!("{p:.2?} {:.1}%", 100.0 * err));
    }
    pass &= saw_i && validation >= 3;
    check(pass, format!("z-bar over {} LT, ESN vs true: {} (tol 5%)", config.stats.duration_lt, parts.join(", ")))
}

fn criterion_8(out: &Path, config: &RunConfig) -> Result<Check> {
    let rows: Vec<ComparisonCsvRow> = read_csv(&out.join("compare/comparison.csv"))?;
    let biases: Vec<BiasRow> = read_csv(&out.join("compare/bias.csv"))?;
    let s = &config.sensitivity;
    let mut pass = s.n_members >= 2000 && (s.window_lt - 0.5).abs() < 1e-12;

    // (a) varied component of every panel point
    let mut failures = Vec::new();
    let mut n_points = 0;
    for r in rows.iter().filter(|r| r.method == "esn-adjoint" && r.panel != "base" && r.param == r.panel) {
        let Some(t) = rows
            .iter()
            .find(|t| t.method == "true-adjoint" && t.panel == r.panel && t.value == r.value && t.param == r.param)
        else {
            continue;
        };
        n_points += 1;
        let (te, ee) = (t.estimate, r.estimate);
        let combined = (t.stderr.unwrap_or(f64::INFINITY).powi(2) + r.stderr.unwrap_or(f64::INFINITY).powi(2)).sqrt();
        let tol = (0.15 * te.abs()).max(3.0 * combined);
        if (ee - te).abs() > tol {
            failures.push(format!("{}={}: {ee:.3} vs {te:.3}", r.panel, r.value));
        }
    }
    let a_ok = n_points > 0 && failures.is_empty();

    // (b) signed bias against the true-system polynomial slope
    let mut r_panel_nonzero = true;
    let mut r_points = 0;
    let mut sign_breaks = Vec::new();
    for t in biases.iter().filter(|b| b.system == "true") {
        let significant = t.bias.abs() > 3.0 * t.adjoint_stderr;
        if t.panel == "r" {
            r_points += 1;
            r_panel_nonzero &= significant;
        }
        if !significant {
            continue;
        }
        match biases.iter().find(|e| e.system == "esn" && e.panel == t.panel && e.value == t.value) {
            Some(e) if e.bias.signum() == t.bias.signum() => {}
            _ => sign_breaks.push(format!("{}={}", t.panel, t.value)),
        }
    }
    let b_ok = r_points > 0 && r_panel_nonzero && sign_breaks.is_empty();
    pass &= a_ok && b_ok;
    check(
        pass,
        format!(
            "(a) {}/{n_points} panel points within max(15%, 3 stderr){}; (b) r-panel bias nonzero: {r_panel_nonzero}, sign mismatches: {sign_breaks:?}",
            n_points - failures.len(),
            if failures.is_empty() { String::new() } else { format!(" [misses: {}]", failures.join("; ")) }
        ),
    )
}

// ------------------------------------------------------------------ 10

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(first: &Path, config: &RunConfig) -> Result<Check> {
    let dir = tempfile::tempdir()?;
    println!("  rerun into {}", dir.path().display());
    run_pipeline(config, dir.path())?;
    let (a, b) = (csv_files(first), csv_files(dir.path()));
    if a != b {
        return check(false, format!("CSV file sets differ ({} vs {})", a.len(), b.len()));
    }
    let differing: Vec<String> = a
        .iter()
        .filter(|f| std::fs::read(first.join(f)).ok() != std::fs::read(dir.path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let model_same = std::fs::read(first.join(MODEL_FILE)).ok() == std::fs::read(dir.path().join(MODEL_FILE)).ok();
    check(
        differing.is_empty() && model_same,
        format!("{} CSV files compared, differing: {differing:?}; model archive identical: {model_same}", a.len()),
    )
}

// ------------------------------------------------------------------

fn report(id: usize, name: &str, result: Result<Check>, failed: &mut usize) {
    match result {
        Ok(c) => {
            if !c.pass {
                *failed += 1;
            }
            println!("criterion {id:>2} {} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
        }
        Err(e) => {
            *failed += 1;
            println!("criterion {id:>2} FAIL {name}: error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let path = std::env::var_os("ESN_ADJOINT_ACCEPTANCE_CONFIG")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.json"));
    let config = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            println!("acceptance: cannot load {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    };
    let dir = tempfile::tempdir().expect("temporary directory");
    let out = dir.path();
    println!("acceptance: config {} -> {}", path.display(), out.display());
    let pipeline = run_pipeline(&config, out);
    match &pipeline {
        Ok(secs) => println!("  pipeline total {secs:.1}s"),
        Err(e) => println!("  pipeline failed: {e}"),
    }
    let model = Esn::load(&out.join(MODEL_FILE));
    let lt = lyapunov_time(LorenzParams::reference(), IntegrationConfig::lyapunov(config.dt), 5)
        .ok()
        .and_then(|e| e.lyapunov_time);

    let mut failed = 0;
    let with_model = |f: &dyn Fn(&Esn, f64) -> Result<Check>| -> Result<Check> {
        let esn = model.as_ref().map_err(|e| esn_adjoint::Error::Config(format!("no trained model: {e}")))?;
        let lt = lt.ok_or_else(|| esn_adjoint::Error::Config("regime (i) has no Lyapunov time".into()))?;
        f(esn, lt)
    };
    report(1, "Jacobian oracles", with_model(&|esn, _| criterion_1(esn)), &mut failed);
    report(2, "tangent/adjoint duality", with_model(&criterion_2), &mut failed);
    report(3, "adjoint vs finite differences", with_model(&criterion_3), &mut failed);
    report(4, "RK4 order", criterion_4(), &mut failed);
    report(5, "Lyapunov time", criterion_5(out, &config), &mut failed);
    report(6, "forecast quality", criterion_6(out), &mut failed);
    report(7, "climate statistics", criterion_7(out, &config), &mut failed);
    report(8, "sensitivity reproduction", criterion_8(out, &config), &mut failed);
    report(9, "adjoint divergence", with_model(&criterion_9), &mut failed);
    report(10, "determinism", criterion_10(out, &config), &mut failed);

    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
