//! Config-driven experiment commands.
//!
//! Every command reads a [`RunConfig`], works inside one output directory
//! and records what it wrote in `manifest.json` there. Commands later in the
//! chain read the CSV files of earlier ones:
//!
//! ```text
//! generate -> data/          train | search -> model/
//! predict  -> predict/       stats -> stats/
//! sensitivity -> sensitivity/   compare (reads sensitivity/) -> compare/
//! ```
//!
//! All randomness derives from `RunConfig::seed` through
//! [`crate::seed::derive_seed`], so identical configs give byte-identical
//! CSV files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::ObjectiveSpec;
use crate::dynsys::{self, steps_for, IntegrationConfig, LorenzParams, PARAM_NAMES};
use crate::ensemble::{
    compare_estimates, ensemble_adjoint, polyfit_direct, sweep_objective, EnsembleConfig, MemberInit, MethodEstimate,
    SensitivityEstimate, SweepPoint, SweepResult, SweepSettings, System,
};
use crate::error::{Error, Result};
use crate::esn::{
    long_term_stats, predictability_horizon, Esn, EsnHyperParams, LongTermConfig, LongTermStats, RegimeDataset,
    RegimeParams, WashoutProtocol, DEFAULT_PREDICTABILITY_THRESHOLD,
};
use crate::hyperopt::{search, SearchSpace, ValidationReport, ValidationSettings};
use crate::seed::derive_seed;

/// Overrides `RunConfig::seed`.
pub const SEED_ENV: &str = "ESN_ADJOINT_SEED";
/// Size of the worker pool.
pub const THREADS_ENV: &str = "ESN_ADJOINT_THREADS";
/// Bumped whenever a CSV layout changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model/model.pesn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Generate,
    Train,
    Search,
    Predict,
    Stats,
    Sensitivity,
    Compare,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Generate,
        Command::Train,
        Command::Search,
        Command::Predict,
        Command::Stats,
        Command::Sensitivity,
        Command::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Search => "search",
            Command::Predict => "predict",
            Command::Stats => "stats",
            Command::Sensitivity => "sensitivity",
            Command::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub b: Vec<f64>,
}

impl Grid {
    pub fn lorenz_default() -> Self {
        Self {
            s: vec![8.0, 10.0, 12.0, 14.0, 16.0],
            r: vec![30.0, 35.0, 40.0, 45.0, 50.0],
            b: vec![1.0, 1.5, 2.0, 2.5, 3.0],
        }
    }

    pub fn axis(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.s,
            1 => &self.r,
            _ => &self.b,
        }
    }

    /// All grid points, `s` slowest.
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.s.len() * self.r.len() * self.b.len());
        for &s in &self.s {
            for &r in &self.r {
                for &b in &self.b {
                    out.push([s, r, b]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSelection {
    pub grid: Grid,
    pub n_train: usize,
    pub n_validation: usize,
    /// Explicit regimes; when given they replace the seeded grid draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBlock {
    pub space: SearchSpace,
    #[serde(default)]
    pub validation: ValidationSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSettings {
    pub regimes: Vec<[f64; 3]>,
    pub n_initial_conditions: usize,
    /// Length of each forecast, in Lyapunov times.
    pub horizon_lt: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSettings {
    pub regimes: Vec<[f64; 3]>,
    /// Also evaluate the first this-many validation regimes.
    #[serde(default)]
    pub n_validation_regimes: usize,
    pub duration_lt: f64,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySettings {
    /// Point every panel passes through; also evaluated on its own.
    pub base: [f64; 3],
    pub n_members: usize,
    pub window_lt: f64,
    #[serde(default = "default_spacing")]
    pub spacing_lt: f64,
    #[serde(default)]
    pub member_init: MemberInit,
    #[serde(default = "default_component")]
    pub objective_component: usize,
    /// Panel grids; the regime grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub panels: Option<Grid>,
    /// Length of the long-run average behind each sweep point, in Lyapunov times.
    pub sweep_duration_lt: f64,
    #[serde(default = "default_degree")]
    pub polyfit_degree: usize,
}

fn default_dt() -> f64 {
    dynsys::DEFAULT_DT
}
fn default_transient() -> f64 {
    dynsys::DEFAULT_TRANSIENT_TIME
}
fn default_threshold() -> f64 {
    DEFAULT_PREDICTABILITY_THRESHOLD
}
fn default_spacing() -> f64 {
    1.0
}
fn default_component() -> usize {
    2
}
fn default_degree() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_transient")]
    pub transient_time: f64,
    pub washout_time: f64,
    pub train_time: f64,
    pub regimes: RegimeSelection,
    /// Hyperparameters used by `train`; `search` ignores them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub esn: Option<EsnHyperParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchBlock>,
    pub predict: PredictSettings,
    pub stats: StatsSettings,
    pub sensitivity: SensitivitySettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Applies environment-style overrides (currently only the seed).
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("washout_time", self.washout_time),
            ("train_time", self.train_time),
            ("predict.horizon_lt", self.predict.horizon_lt),
            ("stats.duration_lt", self.stats.duration_lt),
            ("sensitivity.window_lt", self.sensitivity.window_lt),
            ("sensitivity.sweep_duration_lt", self.sensitivity.sweep_duration_lt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.transient_time >= 0.0) {
            return Err(Error::Config("transient_time must be non-negative".into()));
        }
        let sel = &self.regimes;
        match (&sel.train, &sel.validation) {
            (Some(t), Some(v)) => {
                if t.is_empty() || v.is_empty() {
                    return Err(Error::Config("empty regime list".into()));
                }
                if t.iter().any(|a| v.contains(a)) {
                    return Err(Error::Config("train and validation regimes overlap".into()));
                }
                for p in t.iter().chain(v) {
                    LorenzParams::from_array(*p)?;
                }
            }
            (None, None) => {
                if sel.n_train == 0 || sel.n_validation == 0 {
                    return Err(Error::Config("empty regime list".into()));
                }
                if sel.n_train + sel.n_validation > sel.grid.points().len() {
                    return Err(Error::Config("grid has fewer points than requested regimes".into()));
                }
            }
            _ => return Err(Error::Config("give both explicit train and validation regimes or neither".into())),
        }
        if let Some(h) = &self.esn {
            h.validate()?;
        }
        if let Some(s) = &self.search {
            s.space.validate()?;
        }
        if self.predict.regimes.is_empty() || self.predict.n_initial_conditions == 0 {
            return Err(Error::Config("predict needs regimes and initial conditions".into()));
        }
        if self.stats.bins == 0 {
            return Err(Error::Config("stats.bins must be positive".into()));
        }
        for p in self.predict.regimes.iter().chain(&self.stats.regimes).chain([&self.sensitivity.base]) {
            LorenzParams::from_array(*p)?;
        }
        if self.sensitivity.objective_component >= 3 {
            return Err(Error::Config("objective component out of range".into()));
        }
        EnsembleConfig {
            n_members: self.sensitivity.n_members,
            window_lt: self.sensitivity.window_lt,
            seed: 0,
            dt: self.dt,
            spacing_lt: self.sensitivity.spacing_lt,
        }
        .validate()
    }

    /// SHA-256 of the canonical JSON form; stable under re-serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn washout_steps(&self) -> usize {
        steps_for(self.washout_time, self.dt)
    }

    fn transient_steps(&self) -> usize {
        steps_for(self.transient_time, self.dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub crate_version: String,
    pub csv_schema_version: u32,
    pub commands: BTreeMap<String, CommandRecord>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Self {
        Self {
            config_hash: config.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            commands: BTreeMap::new(),
        }
    }

    pub fn load(out: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(out.join(MANIFEST_FILE))?)?)
    }

    /// Every output path of every recorded command, sorted and deduplicated.
    pub fn outputs(&self) -> Vec<String> {
        let all: BTreeSet<_> = self.commands.values().flat_map(|c| c.outputs.iter().cloned()).collect();
        all.into_iter().collect()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs one command and updates the manifest. A manifest written under a
/// different config is replaced.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> Result<Vec<String>> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let started = unix_now();
    let mut outputs = Outputs::new(out);
    outputs.write_json("config.json", config)?;
    match command {
        Command::Generate => cmd_generate(config, &mut outputs)?,
        Command::Train => cmd_train(config, &mut outputs)?,
        Command::Search => cmd_search(config, &mut outputs)?,
        Command::Predict => cmd_predict(config, &mut outputs)?,
        Command::Stats => cmd_stats(config, &mut outputs)?,
        Command::Sensitivity => cmd_sensitivity(config, &mut outputs)?,
        Command::Compare => cmd_compare(config, &mut outputs)?,
    }
    let mut manifest = match RunManifest::load(out) {
        Ok(m) if m.config_hash == config.hash() => m,
        _ => RunManifest::new(config),
    };
    let record = CommandRecord { started_unix: started, finished_unix: unix_now(), outputs: outputs.paths.clone() };
    manifest.commands.insert(command.name().to_string(), record);
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(outputs.paths)
}

struct Outputs<'a> {
    root: &'a Path,
    paths: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(root: &'a Path) -> Self {
        Self { root, paths: Vec::new() }
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        if !self.paths.iter().any(|x| x == rel) {
            self.paths.push(rel.to_string());
        }
        Ok(p)
    }

    fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(rel)?)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        fs::write(self.path(rel)?, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub index: usize,
    /// `train`, `validation` or `rejected`.
    pub role: String,
    pub s: f64,
    pub r: f64,
    pub b: f64,
    pub lambda_max: Option<f64>,
    pub lyapunov_time: Option<f64>,
    /// `ok`, `non-chaotic` or the integration error.
    pub status: String,
    pub file: Option<String>,
}

impl RegimeRow {
    pub fn params(&self) -> [f64; 3] {
        [self.s, self.r, self.b]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// `washout` or `train`.
    pub phase: String,
}

struct RegimeDraft {
    params: [f64; 3],
    lyapunov: Result<dynsys::LyapunovEstimate>,
}

fn assess(config: &RunConfig, points: &[[f64; 3]], first_index: usize) -> Vec<RegimeDraft> {
    points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let seed = derive_seed(config.seed, "regime-lyapunov", (first_index + k) as u64);
            let lyapunov = LorenzParams::from_array(*p)
                .and_then(|params| dynsys::lyapunov_time(params, IntegrationConfig::lyapunov(config.dt), seed));
            RegimeDraft { params: *p, lyapunov }
        })
        .collect()
}

/// Regimes for training and validation: explicit lists, or a seeded draw
/// from the grid that skips non-chaotic points (recorded as `rejected`).
fn select_regimes(config: &RunConfig) -> Vec<(String, RegimeDraft)> {
    let sel = &config.regimes;
    if let (Some(t), Some(v)) = (&sel.train, &sel.validation) {
        let drafts = assess(config, &[t.as_slice(), v.as_slice()].concat(), 0);
        return drafts
            .into_iter()
            .enumerate()
            .map(|(k, d)| (if k < t.len() { "train" } else { "validation" }.to_string(), d))
            .collect();
    }
    let mut points = sel.grid.points();
    points.shuffle(&mut crate::seed::rng(config.seed, "regime-draw", 0));
    let drafts = assess(config, &points, 0);
    let mut out = Vec::new();
    let (mut n_train, mut n_val) = (0, 0);
    for d in drafts {
        if n_train == sel.n_train && n_val == sel.n_validation {
            break;
        }
        let chaotic = matches!(&d.lyapunov, Ok(e) if e.is_chaotic());
        let role = if !chaotic {
            "rejected"
        } else if n_train < sel.n_train {
            n_train += 1;
            "train"
        } else {
            n_val += 1;
            "validation"
        };
        out.push((role.to_string(), d));
    }
    out
}

fn cmd_generate(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let selected = select_regimes(config);
    let n_used = selected.iter().filter(|(role, _)| role != "rejected").count();
    if n_used == 0 {
        return Err(Error::Config("no usable regimes".into()));
    }
    let washout = config.washout_steps();
    let train = steps_for(config.train_time, config.dt);
    let simulated: Vec<(RegimeRow, Option<Vec<TrajectoryRow>>)> = selected
        .par_iter()
        .enumerate()
        .map(|(index, (role, draft))| {
            let [s, r, b] = draft.params;
            let mut row = RegimeRow {
                index,
                role: role.clone(),
                s,
                r,
                b,
                lambda_max: None,
                lyapunov_time: None,
                status: "ok".into(),
                file: None,
            };
            match &draft.lyapunov {
                Ok(e) => {
                    row.lambda_max = Some(e.lambda_max);
                    row.lyapunov_time = e.lyapunov_time;
                    if !e.is_chaotic() {
                        row.status = "non-chaotic".into();
                    }
                }
                Err(e) => row.status = e.to_string(),
            }
            if role == "rejected" || draft.lyapunov.is_err() {
                return (row, None);
            }
            let ic = dynsys::random_initial_state(derive_seed(config.seed, "regime-ic", index as u64));
            let sim = LorenzParams::from_array(draft.params).and_then(|params| {
                dynsys::simulate(
                    params,
                    ic,
                    IntegrationConfig::new(config.dt, washout + train - 1, config.transient_steps())?,
                )
            });
            match sim {
                Ok(traj) => {
                    let rows = traj
                        .states
                        .iter()
                        .enumerate()
                        .map(|(step, st)| TrajectoryRow {
                            step,
                            t: step as f64 * config.dt,
                            x: st.x,
                            y: st.y,
                            z: st.z,
                            phase: if step < washout { "washout" } else { "train" }.into(),
                        })
                        .collect();
                    row.file = Some(format!("data/regime_{index:03}.csv"));
                    (row, Some(rows))
                }
                Err(e) => {
                    row.status = e.to_string();
                    (row, None)
                }
            }
        })
        .collect();
    for (row, traj) in &simulated {
        if let (Some(file), Some(rows)) = (&row.file, traj) {
            outputs.write_csv(file, rows)?;
        }
    }
    let rows: Vec<RegimeRow> = simulated.into_iter().map(|(r, _)| r).collect();
    outputs.write_csv("data/regimes.csv", &rows)
}

/// Regimes and datasets written by `generate`, split by role.
pub struct LoadedData {
    pub regimes: Vec<RegimeRow>,
    pub train: Vec<RegimeDataset>,
    pub validation: Vec<RegimeDataset>,
}

pub fn load_data(out: &Path, dt: f64) -> Result<LoadedData> {
    let regimes: Vec<RegimeRow> = read_csv(&out.join("data/regimes.csv"))?;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for row in &regimes {
        let Some(file) = &row.file else { continue };
        let rows: Vec<TrajectoryRow> = read_csv(&out.join(file))?;
        let (w, t): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r.phase == "washout");
        let ds = RegimeDataset {
            regime: RegimeParams::new(row.params().to_vec())?,
            washout_series: w.iter().map(|r| vec![r.x, r.y, r.z]).collect(),
            train_series: t.iter().map(|r| vec![r.x, r.y, r.z]).collect(),
            dt,
            lyapunov_time: row.lyapunov_time,
        };
        ds.validate()?;
        match row.role.as_str() {
            "train" => train.push(ds),
            "validation" => validation.push(ds),
            _ => {}
        }
    }
    if train.is_empty() {
        return Err(Error::Config("no training datasets; run generate first".into()));
    }
    Ok(LoadedData { regimes, train, validation })
}

/// Simulates one regime straight into a dataset: a transient is discarded,
/// then `washout_time` of washout and `train_time` of training samples.
pub fn simulate_dataset(
    params: LorenzParams,
    ic_seed: u64,
    dt: f64,
    washout_time: f64,
    train_time: f64,
) -> Result<RegimeDataset> {
    let washout = dynsys::steps_for(washout_time, dt);
    let train = dynsys::steps_for(train_time, dt);
    if washout == 0 || train < 2 {
        return Err(Error::Config("washout and train windows must cover at least one and two steps".into()));
    }
    let config =
        IntegrationConfig::new(dt, washout + train - 1, dynsys::steps_for(dynsys::DEFAULT_TRANSIENT_TIME, dt))?;
    let traj = dynsys::simulate(params, dynsys::random_initial_state(ic_seed), config)?;
    let series: Vec<Vec<f64>> = traj.arrays().iter().map(|x| x.to_vec()).collect();
    let ds = RegimeDataset {
        regime: RegimeParams::from(params),
        washout_series: series[..washout].to_vec(),
        train_series: series[washout..].to_vec(),
        dt,
        lyapunov_time: None,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------- train / search

fn save_model(esn: &Esn, outputs: &mut Outputs) -> Result<()> {
    let path = outputs.path(MODEL_FILE)?;
    esn.save(&path)?;
    outputs.path(&Path::new(MODEL_FILE).with_extension("json").to_string_lossy())?;
    Ok(())
}

fn cmd_train(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let hyper = config.esn.clone().ok_or_else(|| Error::Config("train needs an `esn` block".into()))?;
    let data = load_data(outputs.root, config.dt)?;
    let mut esn = Esn::new(hyper, 3, 3)?;
    let report = esn.train(&data.train)?;
    save_model(&esn, outputs)?;
    outputs.write_json("model/training.json", &report)
}

/// One line of `search/history.csv`: a (candidate, realisation, regime)
/// error, or the candidate's aggregate score when `row` is `aggregate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub candidate: usize,
    pub row: String,
    pub realisation: Option<usize>,
    pub seed: Option<u64>,
    pub s: Option<f64>,
    pub r: Option<f64>,
    pub b: Option<f64>,
    pub error: Option<f64>,
    pub diverged: Option<bool>,
    pub score: Option<f64>,
    pub rho: f64,
    pub sigma_in: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub sigma_b: f64,
    pub k_s: f64,
    pub k_r: f64,
    pub k_b: f64,
    pub failure: Option<String>,
}

fn search_rows(report: &ValidationReport) -> Vec<SearchRow> {
    let h = &report.hyper;
    let base = SearchRow {
        candidate: report.candidate_index,
        row: "aggregate".into(),
        realisation: None,
        seed: None,
        s: None,
        r: None,
        b: None,
        error: None,
        diverged: None,
        score: report.score,
        rho: h.rho,
        sigma_in: h.sigma_in,
        alpha: h.alpha,
        lambda: h.tikhonov,
        sigma_s: h.sigma_p[0],
        sigma_r: h.sigma_p[1],
        sigma_b: h.sigma_p[2],
        k_s: h.k_p[0],
        k_r: h.k_p[1],
        k_b: h.k_p[2],
        failure: report.failure.clone(),
    };
    let mut rows: Vec<SearchRow> = report
        .per_regime
        .iter()
        .map(|e| SearchRow {
            row: "regime".into(),
            realisation: Some(e.realisation),
            seed: Some(e.seed),
            s: e.regime.first().copied(),
            r: e.regime.get(1).copied(),
            b: e.regime.get(2).copied(),
            error: Some(e.error),
            diverged: Some(e.diverged),
            score: None,
            failure: None,
            ..base.clone()
        })
        .collect();
    rows.push(base);
    rows
}

fn cmd_search(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let block = config.search.as_ref().ok_or_else(|| Error::Config("search needs a `search` block".into()))?;
    let data = load_data(outputs.root, config.dt)?;
    let outcome =
        search(&block.space, &data.train, &data.validation, &block.validation, derive_seed(config.seed, "search", 0))?;
    let rows: Vec<SearchRow> = outcome.history.iter().flat_map(search_rows).collect();
    outputs.write_csv("search/history.csv", &rows)?;
    outputs.write_json("search/best.json", &outcome.best)?;
    let mut esn = Esn::new(outcome.best, 3, 3)?;
    let report = esn.train(&data.train)?;
    save_model(&esn, outputs)?;
    outputs.write_json("model/training.json", &report)
}

fn load_model(out: &Path) -> Result<Esn> {
    Esn::load(&out.join(MODEL_FILE))
}

fn regime_lyapunov_time(config: &RunConfig, params: LorenzParams, label: &str, index: usize) -> Result<Option<f64>> {
    let seed = derive_seed(config.seed, label, index as u64);
    Ok(dynsys::lyapunov_time(params, IntegrationConfig::lyapunov(config.dt), seed)?.lyapunov_time)
}

// ----------------------------------------------------------------- predict

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub regime: usize,
    pub s: f64,
    pub r: f64,
    pub b: f64,
    pub lyapunov_time: f64,
    pub ic: usize,
    pub horizon_lt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummaryRow {
    pub regime: usize,
    pub s: f64,
    pub r: f64,
    pub b: f64,
    pub lyapunov_time: f64,
    pub n_initial_conditions: usize,
    pub mean_horizon_lt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub t_lt: f64,
    pub x_true: f64,
    pub y_true: f64,
    pub z_true: f64,
    pub x_esn: f64,
    pub y_esn: f64,
    pub z_esn: f64,
}

fn cmd_predict(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let esn = load_model(outputs.root)?;
    let settings = &config.predict;
    let washout = config.washout_steps();
    let mut horizons = Vec::new();
    let mut summary = Vec::new();
    for (k, p) in settings.regimes.iter().enumerate() {
        let params = LorenzParams::from_array(*p)?;
        let lt = regime_lyapunov_time(config, params, "predict-lyapunov", k)?
            .ok_or_else(|| Error::Config(format!("predict regime {p:?} is not chaotic")))?;
        let forecast = (settings.horizon_lt * lt / config.dt).round() as usize;
        let spacing = (washout + forecast) as f64 * config.dt;
        let starts = dynsys::sample_attractor_with_history(
            params,
            settings.n_initial_conditions,
            spacing,
            0,
            config.dt,
            derive_seed(config.seed, "predict-ic", k as u64),
        )?;
        let regime = RegimeParams::from(params);
        let per_ic: Vec<(f64, Vec<Vec<f64>>)> = starts
            .par_iter()
            .map(|s| {
                let truth: Vec<Vec<f64>> =
                    dynsys::simulate(params, s.state, IntegrationConfig::new(config.dt, washout + forecast - 1, 0)?)?
                        .arrays()
                        .iter()
                        .map(|x| x.to_vec())
                        .collect();
                let h = predictability_horizon(&esn, &regime, &truth, washout, config.dt, lt, settings.threshold)?;
                Ok((h, truth))
            })
            .collect::<Result<_>>()?;
        for (ic, (h, _)) in per_ic.iter().enumerate() {
            horizons.push(HorizonRow { regime: k, s: p[0], r: p[1], b: p[2], lyapunov_time: lt, ic, horizon_lt: *h });
        }
        let mean = per_ic.iter().map(|(h, _)| h).sum::<f64>() / per_ic.len() as f64;
        summary.push(HorizonSummaryRow {
            regime: k,
            s: p[0],
            r: p[1],
            b: p[2],
            lyapunov_time: lt,
            n_initial_conditions: per_ic.len(),
            mean_horizon_lt: mean,
        });

        let truth = &per_ic[0].1;
        let r0 = esn.washout(&truth[..washout], &regime)?;
        let run = esn.closed_loop(&r0, forecast - 1, &regime);
        let mut series = Vec::with_capacity(forecast);
        let first = esn.readout(&r0)?;
        let predictions: Vec<Vec<f64>> = match run {
            Ok(run) => std::iter::once(first.as_slice().to_vec())
                .chain(run.outputs.iter().map(|y| y.as_slice().to_vec()))
                .collect(),
            Err(Error::StateBlowup { .. }) => vec![first.as_slice().to_vec()],
            Err(e) => return Err(e),
        };
        for (i, (y, yhat)) in truth[washout..].iter().zip(&predictions).enumerate() {
            series.push(ForecastRow {
                t_lt: i as f64 * config.dt / lt,
                x_true: y[0],
                y_true: y[1],
                z_true: y[2],
                x_esn: yhat[0],
                y_esn: yhat[1],
                z_esn: yhat[2],
            });
        }
        outputs.write_csv(&format!("predict/series_{k:02}.csv"), &series)?;
    }
    outputs.write_csv("predict/horizons.csv", &horizons)?;
    outputs.write_csv("predict/summary.csv", &summary)
}

// ------------------------------------------------------------------- stats

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub regime: usize,
    pub s: f64,
    pub r: f64,
    pub b: f64,
    pub system: String,
    pub component: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_samples: usize,
    /// `ok` or `diverged`.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub regime: usize,
    pub system: String,
    pub component: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass: f64,
}

const COMPONENT_NAMES: [&str; 3] = ["x", "y", "z"];

fn stats_regimes(config: &RunConfig, out: &Path) -> Result<Vec<[f64; 3]>> {
    let mut regimes = config.stats.regimes.clone();
    if config.stats.n_validation_regimes > 0 {
        let rows: Vec<RegimeRow> = read_csv(&out.join("data/regimes.csv"))?;
        regimes.extend(
            rows.iter()
                .filter(|r| r.role == "validation" && r.file.is_some())
                .take(config.stats.n_validation_regimes)
                .map(|r| r.params()),
        );
    }
    Ok(regimes)
}

fn cmd_stats(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let esn = load_model(outputs.root)?;
    let regimes = stats_regimes(config, outputs.root)?;
    let washout = config.washout_steps();
    let transient = config.transient_steps();
    let results: Vec<(LongTermStats, Option<LongTermStats>, f64)> = regimes
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let params = LorenzParams::from_array(*p)?;
            let lt = regime_lyapunov_time(config, params, "stats-lyapunov", k)?
                .ok_or_else(|| Error::Config(format!("stats regime {p:?} is not chaotic")))?;
            let n = (config.stats.duration_lt * lt / config.dt).round() as usize;
            let seed = derive_seed(config.seed, "stats-ic", k as u64);
            let truth = dynsys::simulate(
                params,
                dynsys::random_initial_state(seed),
                IntegrationConfig::new(config.dt, washout + n - 1, transient)?,
            )?;
            let arrays = truth.arrays();
            let samples: Vec<Vec<f64>> = arrays[washout..].iter().map(|x| x.to_vec()).collect();
            let ranges: Vec<(f64, f64)> = (0..3)
                .map(|c| {
                    let (lo, hi) =
                        samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y[c]), b.max(y[c])));
                    let pad = 0.05 * (hi - lo);
                    (lo - pad, hi + pad)
                })
                .collect();
            let true_stats = LongTermStats::from_samples(&samples, config.stats.bins, Some(&ranges))?;
            let lt_config = LongTermConfig {
                duration_lt: config.stats.duration_lt,
                lyapunov_time: lt,
                dt: config.dt,
                transient_steps: transient,
                bins: config.stats.bins,
                ranges: Some(ranges),
            };
            let protocol = WashoutProtocol::TrueSeries(arrays[..washout].iter().map(|x| x.to_vec()).collect());
            let esn_stats = match long_term_stats(&esn, &RegimeParams::from(params), &lt_config, &protocol) {
                Ok(s) => Some(s),
                Err(Error::DivergedAttractor { .. } | Error::StateBlowup { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok((true_stats, esn_stats, lt))
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::new();
    let mut histograms = Vec::new();
    for (k, (p, (true_stats, esn_stats, _))) in regimes.iter().zip(&results).enumerate() {
        for (system, stats) in [("true", Some(true_stats)), ("esn", esn_stats.as_ref())] {
            for (c, name) in COMPONENT_NAMES.iter().enumerate() {
                summary.push(StatsRow {
                    regime: k,
                    s: p[0],
                    r: p[1],
                    b: p[2],
                    system: system.into(),
                    component: name.to_string(),
                    mean: stats.map(|s| s.mean[c]),
                    std: stats.map(|s| s.std[c]),
                    n_samples: stats.map_or(0, |s| s.n_samples),
                    status: if stats.is_some() { "ok" } else { "diverged" }.into(),
                });
                let Some(stats) = stats else { continue };
                let h = &stats.histograms[c];
                let width = (h.hi - h.lo) / h.mass.len() as f64;
                for (i, m) in h.mass.iter().enumerate() {
                    histograms.push(HistogramRow {
                        regime: k,
                        system: system.into(),
                        component: name.to_string(),
                        bin_lo: h.lo + i as f64 * width,
                        bin_hi: h.lo + (i + 1) as f64 * width,
                        mass: *m,
                    });
                }
            }
        }
    }
    outputs.write_csv("stats/summary.csv", &summary)?;
    outputs.write_csv("stats/histograms.csv", &histograms)
}

// ------------------------------------------------------------- sensitivity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    /// `base` or the swept parameter name.
    pub panel: String,
    pub value: f64,
    pub s: f64,
    pub r: f64,
    pub b: f64,
    pub lyapunov_time: Option<f64>,
    pub system: String,
    pub param: String,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub n_members: usize,
    pub n_diverged: usize,
    /// `ok`, `unreliable` or `non-chaotic`.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRow {
    pub system: String,
    pub member: usize,
    pub ds: f64,
    pub dr: f64,
    pub db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub panel: String,
    pub value: f64,
    pub system: String,
    pub lyapunov_time: Option<f64>,
    pub objective: Option<f64>,
}

struct PanelPoint {
    panel: String,
    value: f64,
    params: [f64; 3],
}

fn panel_points(config: &RunConfig) -> Vec<PanelPoint> {
    let base = config.sensitivity.base;
    let grid = config.sensitivity.panels.as_ref().unwrap_or(&config.regimes.grid);
    let mut points = vec![PanelPoint { panel: "base".into(), value: f64::NAN, params: base }];
    for (j, name) in PARAM_NAMES.iter().enumerate() {
        for &v in grid.axis(j) {
            let mut params = base;
            params[j] = v;
            points.push(PanelPoint { panel: name.to_string(), value: v, params });
        }
    }
    points
}

fn estimate_rows(
    point: &PanelPoint,
    lt: Option<f64>,
    system: &str,
    result: &Option<Result<SensitivityEstimate>>,
) -> Result<Vec<EstimateRow>> {
    let value = if point.panel == "base" { 0.0 } else { point.value };
    let (estimate, status) = match result {
        None => (None, "non-chaotic"),
        Some(Ok(e)) => (Some(e), "ok"),
        Some(Err(Error::UnreliableEstimate { partial })) => (Some(partial.as_ref()), "unreliable"),
        Some(Err(e)) => return Err(Error::Config(format!("sensitivity at {:?}: {e}", point.params))),
    };
    Ok(PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| EstimateRow {
            panel: point.panel.clone(),
            value,
            s: point.params[0],
            r: point.params[1],
            b: point.params[2],
            lyapunov_time: lt,
            system: system.into(),
            param: name.to_string(),
            mean: estimate.map(|e| e.mean[j]),
            stderr: estimate.map(|e| e.stderr[j]),
            n_members: estimate.map_or(0, |e| e.n_members()),
            n_diverged: estimate.map_or(0, |e| e.n_diverged),
            status: status.into(),
        })
        .collect())
}

fn cmd_sensitivity(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let esn = load_model(outputs.root)?;
    let settings = &config.sensitivity;
    let objective = ObjectiveSpec { component: settings.objective_component };
    let init = match settings.member_init {
        MemberInit::TrueWashout { .. } => MemberInit::TrueWashout { washout_steps: config.washout_steps() },
        other => other,
    };
    let systems = [System::True, System::Esn { model: &esn, init }];
    let points = panel_points(config);

    let mut estimates = Vec::new();
    let mut members = Vec::new();
    for (k, point) in points.iter().enumerate() {
        let params = LorenzParams::from_array(point.params)?;
        let lt = regime_lyapunov_time(config, params, "sensitivity-lyapunov", k)?;
        let ensemble = EnsembleConfig {
            n_members: settings.n_members,
            window_lt: settings.window_lt,
            seed: derive_seed(config.seed, "sensitivity-ensemble", k as u64),
            dt: config.dt,
            spacing_lt: settings.spacing_lt,
        };
        for system in &systems {
            let result = lt.map(|lt| ensemble_adjoint(system, params, lt, &ensemble, objective));
            estimates.extend(estimate_rows(point, lt, system.tag(), &result)?);
            if point.panel == "base" {
                if let Some(Ok(e)) = &result {
                    for (m, idx) in e.members.iter().zip(&e.member_indices) {
                        members.push(MemberRow {
                            system: system.tag().into(),
                            member: *idx,
                            ds: m.djdp[0],
                            dr: m.djdp[1],
                            db: m.djdp[2],
                        });
                    }
                }
            }
        }
    }

    let grid = settings.panels.as_ref().unwrap_or(&config.regimes.grid);
    let base = LorenzParams::from_array(settings.base)?;
    let mut sweeps = Vec::new();
    for (j, name) in PARAM_NAMES.iter().enumerate() {
        for system in &systems {
            let sweep_settings = SweepSettings {
                duration_lt: settings.sweep_duration_lt,
                dt: config.dt,
                seed: derive_seed(config.seed, "sensitivity-sweep", j as u64),
                washout_steps: config.washout_steps(),
            };
            let sweep = sweep_objective(base, j, grid.axis(j), system, &sweep_settings, objective)?;
            sweeps.extend(sweep.points.iter().map(|p| SweepRow {
                panel: name.to_string(),
                value: p.value,
                system: system.tag().into(),
                lyapunov_time: p.lyapunov_time,
                objective: p.objective,
            }));
        }
    }
    outputs.write_csv("sensitivity/estimates.csv", &estimates)?;
    outputs.write_csv("sensitivity/members.csv", &members)?;
    outputs.write_csv("sensitivity/sweep.csv", &sweeps)
}

// ----------------------------------------------------------------- compare

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCsvRow {
    pub panel: String,
    pub value: f64,
    pub param: String,
    pub method: String,
    pub estimate: f64,
    pub stderr: Option<f64>,
    /// Against the true-system ensemble adjoint.
    pub abs_diff: f64,
    pub rel_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub panel: String,
    pub value: f64,
    pub system: String,
    pub adjoint: f64,
    pub adjoint_stderr: f64,
    /// Direct estimate: slope of the polynomial fit to the true-system sweep.
    pub polyfit_slope: f64,
    /// `adjoint - polyfit_slope`.
    pub bias: f64,
    /// Slope of the fit to this system's own sweep.
    pub own_polyfit_slope: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub panel: String,
    pub system: String,
    pub value: f64,
    pub objective: Option<f64>,
    pub fitted: f64,
    pub slope: f64,
}

fn ensemble_of(rows: &[EstimateRow], panel: &str, value: f64, system: &str) -> Option<MethodEstimate> {
    let sel: Vec<&EstimateRow> = rows
        .iter()
        .filter(|r| r.panel == panel && r.value == value && r.system == system && r.status == "ok")
        .collect();
    (sel.len() == 3).then(|| MethodEstimate {
        method: format!("{system}-adjoint"),
        value: sel.iter().map(|r| r.mean).collect(),
        stderr: sel.iter().map(|r| r.stderr).collect(),
    })
}

fn cmd_compare(config: &RunConfig, outputs: &mut Outputs) -> Result<()> {
    let estimates: Vec<EstimateRow> = read_csv(&outputs.root.join("sensitivity/estimates.csv"))?;
    let sweep_rows: Vec<SweepRow> = read_csv(&outputs.root.join("sensitivity/sweep.csv"))?;
    let degree = config.sensitivity.polyfit_degree;
    let mut comparison = Vec::new();
    let mut biases = Vec::new();
    let mut fits = Vec::new();

    let mut push_rows = |panel: &str, value: f64, rows: Vec<crate::ensemble::ComparisonRow>| {
        comparison.extend(rows.into_iter().map(|r| ComparisonCsvRow {
            panel: panel.into(),
            value,
            param: r.param,
            method: r.method,
            estimate: r.value,
            stderr: r.stderr,
            abs_diff: r.abs_diff,
            rel_diff: r.rel_diff,
        }));
    };
    if let (Some(t), e) = (ensemble_of(&estimates, "base", 0.0, "true"), ensemble_of(&estimates, "base", 0.0, "esn")) {
        push_rows("base", 0.0, compare_estimates(&t, e.as_slice()));
    }

    for (j, name) in PARAM_NAMES.iter().enumerate() {
        let mut slopes: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for system in ["true", "esn"] {
            let points: Vec<SweepPoint> = sweep_rows
                .iter()
                .filter(|r| r.panel == *name && r.system == system)
                .map(|r| SweepPoint { value: r.value, lyapunov_time: r.lyapunov_time, objective: r.objective })
                .collect();
            let sweep = SweepResult { param_index: j, system: system.into(), points };
            let Ok((fit, s)) = polyfit_direct(&sweep, degree) else { continue };
            for (p, slope) in sweep.points.iter().zip(&s) {
                fits.push(FitRow {
                    panel: name.to_string(),
                    system: system.into(),
                    value: p.value,
                    objective: p.objective,
                    fitted: fit.eval(p.value),
                    slope: *slope,
                });
            }
            slopes.insert(system, s);
        }
        let values: Vec<f64> =
            sweep_rows.iter().filter(|r| r.panel == *name && r.system == "true").map(|r| r.value).collect();
        for (i, &v) in values.iter().enumerate() {
            let Some(t) = ensemble_of(&estimates, name, v, "true") else { continue };
            let e = ensemble_of(&estimates, name, v, "esn");
            let mut others: Vec<MethodEstimate> = e.iter().cloned().collect();
            for (system, s) in &slopes {
                others.push(MethodEstimate::single(&format!("{system}-polyfit"), 3, j, s[i]));
            }
            push_rows(name, v, compare_estimates(&t, &others));
            let Some(direct) = slopes.get("true").map(|s| s[i]) else { continue };
            for (system, est) in [("true", Some(&t)), ("esn", e.as_ref())] {
                let Some(est) = est else { continue };
                let (Some(adjoint), Some(stderr)) = (est.value[j], est.stderr[j]) else { continue };
                biases.push(BiasRow {
                    panel: name.to_string(),
                    value: v,
                    system: system.into(),
                    adjoint,
                    adjoint_stderr: stderr,
                    polyfit_slope: direct,
                    bias: adjoint - direct,
                    own_polyfit_slope: slopes.get(system).map(|s| s[i]),
                });
            }
        }
    }
    outputs.write_csv("compare/comparison.csv", &comparison)?;
    outputs.write_csv("compare/bias.csv", &biases)?;
    outputs.write_csv("compare/polyfit.csv", &fits)
}
