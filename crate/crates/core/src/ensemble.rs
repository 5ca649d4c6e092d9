//! Climate sensitivities: ensemble means of short-window adjoint gradients,
//! parameter sweeps of the long-time average and polynomial-fit slopes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_sweep, ObjectiveSpec, SensitivityVector};
use crate::dynsys::{
    self, lyapunov_time, sample_attractor_with_history, steps_for, true_window_sensitivity, IntegrationConfig,
    LorenzParams, DEFAULT_TRANSIENT_TIME,
};
use crate::error::{Error, Result};
use crate::esn::{long_term_stats, Esn, LongTermConfig, RegimeParams, ReservoirState, WashoutProtocol};

/// Largest tolerated fraction of diverged members.
pub const MAX_DIVERGED_FRACTION: f64 = 0.2;

/// How ESN ensemble members obtain their initial reservoir state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MemberInit {
    /// Teacher-forced washout on the true trajectory segment ending at the
    /// member's attractor sample.
    TrueWashout { washout_steps: usize },
    /// States drawn from one long autonomous run of the network.
    SelfGenerated { washout_steps: usize, spinup_lt: f64 },
}

impl Default for MemberInit {
    fn default() -> Self {
        MemberInit::TrueWashout { washout_steps: 400 }
    }
}

/// System whose adjoint supplies the member gradients.
#[derive(Clone, Copy, Debug)]
pub enum System<'a> {
    True,
    Esn { model: &'a Esn, init: MemberInit },
}

impl System<'_> {
    pub fn tag(&self) -> &'static str {
        match self {
            System::True => "true",
            System::Esn { .. } => "esn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub window_lt: f64,
    pub seed: u64,
    pub dt: f64,
    /// Spacing of attractor samples, in Lyapunov times.
    pub spacing_lt: f64,
}

impl EnsembleConfig {
    pub fn new(n_members: usize, window_lt: f64, seed: u64) -> Self {
        Self { n_members, window_lt, seed, dt: dynsys::DEFAULT_DT, spacing_lt: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        if !(self.window_lt > 0.0 && self.spacing_lt > 0.0 && self.dt > 0.0) {
            return Err(Error::Config("window, spacing and dt must be positive".into()));
        }
        Ok(())
    }

    /// Window length in steps for a regime with Lyapunov time `lt`.
    pub fn window_steps(&self, lt: f64) -> usize {
        ((self.window_lt * lt / self.dt).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Non-diverged members in member-index order.
    pub members: Vec<SensitivityVector>,
    /// Member indices of `members`.
    pub member_indices: Vec<usize>,
    pub n_diverged: usize,
}

impl SensitivityEstimate {
    /// Mean and standard error (`sample std / sqrt(n)`) over `members`.
    pub fn from_members(members: Vec<SensitivityVector>, member_indices: Vec<usize>, n_diverged: usize) -> Self {
        let n_p = members.first().map_or(0, |m| m.djdp.len());
        let n = members.len() as f64;
        let mut mean = vec![0.0; n_p];
        for m in &members {
            mean.iter_mut().zip(&m.djdp).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let stderr = (0..n_p)
            .map(|j| {
                if members.len() < 2 {
                    return f64::NAN;
                }
                let ss: f64 = members.iter().map(|m| (m.djdp[j] - mean[j]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt() / n.sqrt()
            })
            .collect();
        Self { mean, stderr, members, member_indices, n_diverged }
    }

    pub fn n_members(&self) -> usize {
        self.members.len() + self.n_diverged
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::DivergedAdjoint { .. }
            | Error::IntegrationBlowup { .. }
            | Error::StateBlowup { .. }
            | Error::DivergedAttractor { .. }
            | Error::DivergedTangent { .. }
    )
}

fn finish(results: Vec<Result<SensitivityVector>>) -> Result<SensitivityEstimate> {
    let mut members = Vec::with_capacity(results.len());
    let mut indices = Vec::with_capacity(results.len());
    let mut n_diverged = 0;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => {
                members.push(v);
                indices.push(k);
            }
            Err(e) if is_divergence(&e) => n_diverged += 1,
            Err(e) => return Err(e),
        }
    }
    let total = members.len() + n_diverged;
    let estimate = SensitivityEstimate::from_members(members, indices, n_diverged);
    if n_diverged as f64 > MAX_DIVERGED_FRACTION * total as f64 {
        return Err(Error::UnreliableEstimate { partial: Box::new(estimate) });
    }
    Ok(estimate)
}

/// Ensemble-adjoint estimate of the climate sensitivity at `regime`.
///
/// Members start from attractor samples spaced by `spacing_lt` Lyapunov
/// times. The true system runs its continuous adjoint over each window; the
/// network is first brought onto the member (see [`MemberInit`]) and then
/// differentiated with [`adjoint_sweep`]. Both systems draw their samples
/// from the same seeded stream, so member `k` of either ensemble starts from
/// the same attractor location under [`MemberInit::TrueWashout`]. The
/// reduction runs in member order.
pub fn ensemble_adjoint(
    system: &System,
    regime: LorenzParams,
    lyapunov_time: f64,
    config: &EnsembleConfig,
    objective: ObjectiveSpec,
) -> Result<SensitivityEstimate> {
    config.validate()?;
    let n = config.window_steps(lyapunov_time);
    let window = n as f64 * config.dt;
    let spacing = config.spacing_lt * lyapunov_time;
    let ic_seed = crate::seed::derive_seed(config.seed, "ensemble-ics", 0);
    match system {
        System::True => {
            let samples = sample_attractor_with_history(regime, config.n_members, spacing, 0, config.dt, ic_seed)?;
            let results = samples
                .par_iter()
                .map(|s| true_window_sensitivity(regime, s.state, window, config.dt, objective))
                .collect();
            finish(results)
        }
        System::Esn { model, init } => {
            let p = RegimeParams::from(regime);
            let starts: Vec<Result<ReservoirState>> = match *init {
                MemberInit::TrueWashout { washout_steps } => {
                    let samples = sample_attractor_with_history(
                        regime,
                        config.n_members,
                        spacing,
                        washout_steps,
                        config.dt,
                        ic_seed,
                    )?;
                    samples
                        .par_iter()
                        .map(|s| {
                            let history: Vec<Vec<f64>> = s.history.iter().map(|x| x.to_vec()).collect();
                            model.washout(&history, &p)
                        })
                        .collect()
                }
                MemberInit::SelfGenerated { washout_steps, spinup_lt } => {
                    self_generated_states(model, regime, &p, config, lyapunov_time, washout_steps, spinup_lt, ic_seed)?
                        .into_iter()
                        .map(Ok)
                        .collect()
                }
            };
            let results = starts
                .into_par_iter()
                .map(|r0| {
                    let run = model.closed_loop(&r0?, n, &p)?;
                    Ok(adjoint_sweep(model, &run.trajectory, objective)?.sensitivity)
                })
                .collect();
            finish(results)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn self_generated_states(
    model: &Esn,
    regime: LorenzParams,
    p: &RegimeParams,
    config: &EnsembleConfig,
    lyapunov_time: f64,
    washout_steps: usize,
    spinup_lt: f64,
    seed: u64,
) -> Result<Vec<ReservoirState>> {
    let start = sample_attractor_with_history(regime, 1, 1.0, washout_steps, config.dt, seed)?;
    let history: Vec<Vec<f64>> = start[0].history.iter().map(|x| x.to_vec()).collect();
    let r0 = model.washout(&history, p)?;
    let spinup = (spinup_lt * lyapunov_time / config.dt).round() as usize;
    let stride = ((config.spacing_lt * lyapunov_time / config.dt).ceil() as usize).max(1);
    let total = spinup + (config.n_members - 1) * stride;
    let mut states = Vec::with_capacity(config.n_members);
    model.run_closed_loop(&r0, total.max(1), p, |i, r, _| {
        if i >= spinup.max(1) && (i - spinup.max(1)).is_multiple_of(stride) && states.len() < config.n_members {
            states.push(DVector::from_column_slice(r));
        }
        Ok(())
    })?;
    Ok(states)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    /// Coefficients in the normalized variable `(x - center) / half_width`,
    /// lowest degree first.
    pub coeffs: Vec<f64>,
    pub center: f64,
    pub half_width: f64,
}

impl PolyFit {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.half_width;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.half_width;
        let d = self.coeffs.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, c)| acc * t + k as f64 * c);
        d / self.half_width
    }
}

/// Least-squares polynomial through `(x, y)`.
pub fn fit_polynomial(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    if x.len() != y.len() {
        return Err(Error::Shape("x and y differ in length".into()));
    }
    if x.len() < degree + 1 {
        return Err(Error::UnderdeterminedFit { degree, points: x.len() });
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let center = 0.5 * (lo + hi);
    let half_width = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
    let vander = DMatrix::from_fn(x.len(), degree + 1, |i, k| ((x[i] - center) / half_width).powi(k as i32));
    let svd = vander.svd(true, true);
    let coeffs = svd
        .solve(&DVector::from_column_slice(y), 1e-12)
        .map_err(|e| Error::Config(format!("polynomial fit failed: {e}")))?;
    Ok(PolyFit { coeffs: coeffs.iter().copied().collect(), center, half_width })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub lyapunov_time: Option<f64>,
    /// Long-run mean of the objective; `None` when the point was flagged.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub param_index: usize,
    pub system: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    fn valid(&self) -> (Vec<f64>, Vec<f64>) {
        self.points.iter().filter_map(|p| p.objective.map(|o| (p.value, o))).unzip()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub duration_lt: f64,
    pub dt: f64,
    pub seed: u64,
    /// Washout length for the network branch.
    pub washout_steps: usize,
}

/// Long-run objective mean at every grid value of parameter `param_index`,
/// the other parameters held at `base`.
///
/// A grid point whose network attractor diverges or whose true regime is
/// not chaotic is flagged (objective `None`) rather than failing the sweep.
pub fn sweep_objective(
    base: LorenzParams,
    param_index: usize,
    grid: &[f64],
    system: &System,
    settings: &SweepSettings,
    objective: ObjectiveSpec,
) -> Result<SweepResult> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("sweep grid must be strictly increasing".into()));
    }
    if param_index >= 3 {
        return Err(Error::Config(format!("parameter index {param_index} out of range")));
    }
    let points = grid
        .par_iter()
        .enumerate()
        .map(|(k, &value)| {
            let params = base.with_component(param_index, value)?;
            let seed = crate::seed::derive_seed(settings.seed, "sweep", k as u64);
            let lt = lyapunov_time(params, IntegrationConfig::lyapunov(settings.dt), seed)?.lyapunov_time;
            let Some(lt_value) = lt else {
                return Ok(SweepPoint { value, lyapunov_time: None, objective: None });
            };
            let n = (settings.duration_lt * lt_value / settings.dt).round() as usize;
            let transient = steps_for(DEFAULT_TRANSIENT_TIME, settings.dt);
            let objective_mean = match system {
                System::True => {
                    let config = IntegrationConfig::new(settings.dt, n, transient)?;
                    let traj = dynsys::simulate(params, dynsys::random_initial_state(seed), config)?;
                    let c = traj.component(objective.component);
                    Some(c[1..].iter().sum::<f64>() / n as f64)
                }
                System::Esn { model, .. } => {
                    let config = IntegrationConfig::new(settings.dt, settings.washout_steps, transient)?;
                    let washout = dynsys::simulate(params, dynsys::random_initial_state(seed), config)?;
                    let series: Vec<Vec<f64>> = washout.arrays().iter().map(|x| x.to_vec()).collect();
                    let lt_config = LongTermConfig {
                        duration_lt: settings.duration_lt,
                        lyapunov_time: lt_value,
                        dt: settings.dt,
                        transient_steps: transient,
                        bins: 1,
                        ranges: None,
                    };
                    match long_term_stats(
                        model,
                        &RegimeParams::from(params),
                        &lt_config,
                        &WashoutProtocol::TrueSeries(series),
                    ) {
                        Ok(stats) => Some(stats.mean[objective.component]),
                        Err(Error::DivergedAttractor { .. }) => None,
                        Err(e) => return Err(e),
                    }
                }
            };
            Ok(SweepPoint { value, lyapunov_time: lt, objective: objective_mean })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { param_index, system: system.tag().to_string(), points })
}

/// Polynomial fit of the sweep and its analytic slope at every grid value.
pub fn polyfit_direct(sweep: &SweepResult, degree: usize) -> Result<(PolyFit, Vec<f64>)> {
    let (x, y) = sweep.valid();
    let fit = fit_polynomial(&x, &y, degree)?;
    let slopes = sweep.grid().iter().map(|v| fit.derivative(*v)).collect();
    Ok((fit, slopes))
}

/// One method's estimate of the sensitivity vector; components a method
/// does not provide are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: String,
    pub value: Vec<Option<f64>>,
    pub stderr: Vec<Option<f64>>,
}

impl MethodEstimate {
    pub fn from_ensemble(method: &str, e: &SensitivityEstimate) -> Self {
        Self {
            method: method.to_string(),
            value: e.mean.iter().map(|v| Some(*v)).collect(),
            stderr: e.stderr.iter().map(|v| Some(*v)).collect(),
        }
    }

    /// A polynomial slope for parameter `index` only.
    pub fn single(method: &str, n_p: usize, index: usize, value: f64) -> Self {
        let mut v = vec![None; n_p];
        v[index] = Some(value);
        Self { method: method.to_string(), value: v, stderr: vec![None; n_p] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub param: String,
    pub method: String,
    pub value: f64,
    pub stderr: Option<f64>,
    /// Against the reference estimate.
    pub abs_diff: f64,
    pub rel_diff: f64,
}

/// One row per (parameter, method) the methods provide, measured against
/// `reference` (itself listed first with zero difference).
pub fn compare_estimates(reference: &MethodEstimate, others: &[MethodEstimate]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for (j, name) in dynsys::PARAM_NAMES.iter().enumerate().take(reference.value.len()) {
        let Some(base) = reference.value[j] else { continue };
        for m in std::iter::once(reference).chain(others) {
            if let Some(value) = m.value.get(j).copied().flatten() {
                rows.push(ComparisonRow {
                    param: name.to_string(),
                    method: m.method.clone(),
                    value,
                    stderr: m.stderr.get(j).copied().flatten(),
                    abs_diff: (value - base).abs(),
                    rel_diff: (value - base).abs() / base.abs(),
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::Method;

    fn member(v: [f64; 3]) -> SensitivityVector {
        SensitivityVector { djdp: v.to_vec(), window_steps: 10, method: Method::Adjoint }
    }

    #[test]
    fn duplicated_members_have_zero_stderr() {
        let e = SensitivityEstimate::from_members(vec![member([1.0, 2.0, 3.0]); 2], vec![0, 1], 0);
        assert_eq!(e.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.stderr, vec![0.0; 3]);
    }

    #[test]
    fn stderr_is_sample_std_over_root_n() {
        let e =
            SensitivityEstimate::from_members(vec![member([1.0, 0.0, 0.0]), member([3.0, 0.0, 0.0])], vec![0, 1], 0);
        assert_eq!(e.mean[0], 2.0);
        assert!((e.stderr[0] - 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn too_many_diverged_members_is_unreliable() {
        let results = vec![
            Ok(member([1.0, 1.0, 1.0])),
            Err(Error::DivergedAdjoint { step: 3, time: 0.3 }),
            Ok(member([1.0, 1.0, 1.0])),
        ];
        match finish(results) {
            Err(Error::UnreliableEstimate { partial }) => {
                assert_eq!(partial.n_diverged, 1);
                assert_eq!(partial.n_members(), 3);
                assert_eq!(partial.member_indices, vec![0, 2]);
            }
            other => panic!("{other:?}"),
        }
        let mut ok: Vec<Result<SensitivityVector>> = (0..9).map(|_| Ok(member([0.0; 3]))).collect();
        ok.push(Err(Error::StateBlowup { step: 1 }));
        let e = finish(ok).unwrap();
        assert_eq!(e.members.len() + e.n_diverged, 10);
    }

    #[test]
    fn polynomial_recovers_exact_data() {
        let x = [30.0, 35.0, 40.0, 45.0, 50.0];
        let line: Vec<f64> = x.iter().map(|v| 2.5 * v - 7.0).collect();
        let fit = fit_polynomial(&x, &line, 1).unwrap();
        for v in x {
            assert!((fit.derivative(v) - 2.5).abs() < 1e-12);
        }
        let quad: Vec<f64> = x.iter().map(|v| 0.3 * v * v - 2.0 * v + 1.0).collect();
        let fit = fit_polynomial(&x, &quad, 2).unwrap();
        for v in x {
            assert!((fit.derivative(v) - (0.6 * v - 2.0)).abs() < 1e-10);
            assert!((fit.eval(v) - (0.3 * v * v - 2.0 * v + 1.0)).abs() < 1e-9);
        }
        assert!(matches!(fit_polynomial(&x[..2], &quad[..2], 2), Err(Error::UnderdeterminedFit { .. })));
    }

    #[test]
    fn comparison_rows_structure() {
        let t =
            SensitivityEstimate::from_members(vec![member([1.0, 2.0, -1.0]), member([1.0, 2.0, -1.0])], vec![0, 1], 0);
        let rows = compare_estimates(
            &MethodEstimate::from_ensemble("true-adjoint", &t),
            &[MethodEstimate::from_ensemble("esn-adjoint", &t), MethodEstimate::single("polyfit", 3, 1, 0.9)],
        );
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().filter(|r| r.method != "polyfit").all(|r| r.abs_diff == 0.0));
        let poly: Vec<_> = rows.iter().filter(|r| r.method == "polyfit").collect();
        assert_eq!(poly.len(), 1);
        assert_eq!(poly[0].param, "r");
    }

    #[test]
    fn single_point_sweep_cannot_be_fitted() {
        let sweep = SweepResult {
            param_index: 1,
            system: "true".into(),
            points: vec![SweepPoint { value: 30.0, lyapunov_time: Some(1.0), objective: Some(25.0) }],
        };
        assert!(polyfit_direct(&sweep, 1).is_err());
    }
}
