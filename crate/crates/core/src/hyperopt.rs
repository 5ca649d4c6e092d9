//! Hyperparameter search scored by closed-loop error on held-out regimes.
//!
//! Candidates come from a seeded stream: candidate `i` depends only on
//! `(seed, i)`, so a larger budget evaluates a superset of a smaller one. An
//! optional refinement stage resamples Gaussian perturbations (in the unit
//! cube of the search space) around the best random-stage candidates.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esn::{Esn, EsnHyperParams, RegimeDataset, DIVERGENCE_FACTOR};

/// Error charged to a diverged closed-loop rollout.
pub const DIVERGED_PENALTY: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn validate(&self, name: &str, log: bool) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!("{name}: bounds [{}, {}] invalid", self.lo, self.hi)));
        }
        if log && self.lo <= 0.0 {
            return Err(Error::Config(format!("{name}: log-uniform bounds must be positive")));
        }
        Ok(())
    }

    fn decode(&self, u: f64, log: bool) -> f64 {
        if log {
            (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }

    fn encode(&self, v: f64, log: bool) -> f64 {
        if log {
            (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }
}

/// Local resampling around the best random-stage candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub budget: usize,
    pub top_k: usize,
    /// Standard deviation of the perturbation in unit-cube coordinates.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_reservoir: usize,
    pub n_conn: usize,
    /// Log-uniform.
    pub rho: Bounds,
    /// Log-uniform.
    pub sigma_in: Bounds,
    pub alpha: Bounds,
    /// Log-uniform.
    #[serde(rename = "lambda")]
    pub tikhonov: Bounds,
    /// Log-uniform, one per parameter.
    pub sigma_p: Vec<Bounds>,
    pub k_p: Vec<Bounds>,
    /// Random-stage evaluations.
    pub budget: usize,
    pub n_network_realisations: usize,
    #[serde(default)]
    pub refine: Option<Refinement>,
}

impl SearchSpace {
    /// Desk-scale defaults for the three Lorenz parameters.
    pub fn lorenz_default() -> Self {
        Self {
            n_reservoir: 300,
            n_conn: 3,
            rho: Bounds::new(0.3, 1.2),
            sigma_in: Bounds::new(0.1, 3.0),
            alpha: Bounds::new(0.5, 1.0),
            tikhonov: Bounds::new(1e-8, 1e-3),
            sigma_p: vec![Bounds::new(0.01, 0.5), Bounds::new(0.005, 0.2), Bounds::new(0.05, 2.0)],
            // Shifts outside the grid keep p - k_p one-signed over every regime.
            k_p: vec![Bounds::new(20.0, 100.0), Bounds::new(60.0, 120.0), Bounds::new(5.0, 50.0)],
            budget: 50,
            n_network_realisations: 2,
            refine: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rho.validate("rho", true)?;
        self.sigma_in.validate("sigma_in", true)?;
        self.alpha.validate("alpha", false)?;
        if self.alpha.lo <= 0.0 || self.alpha.hi > 1.0 {
            return Err(Error::Config("alpha bounds must lie in (0, 1]".into()));
        }
        self.tikhonov.validate("lambda", true)?;
        if self.sigma_p.len() != self.k_p.len() {
            return Err(Error::Config("sigma_p and k_p bounds differ in length".into()));
        }
        for b in &self.sigma_p {
            b.validate("sigma_p", true)?;
        }
        for b in &self.k_p {
            b.validate("k_p", false)?;
        }
        if self.budget == 0 || self.n_network_realisations == 0 {
            return Err(Error::Config("budget and realisations must be at least 1".into()));
        }
        if self.n_reservoir == 0 || self.n_conn == 0 || self.n_conn > self.n_reservoir {
            return Err(Error::Config("invalid reservoir size or connectivity".into()));
        }
        Ok(())
    }

    fn dims(&self) -> usize {
        4 + 2 * self.sigma_p.len()
    }

    pub fn decode(&self, u: &[f64], seed: u64) -> EsnHyperParams {
        let n_p = self.sigma_p.len();
        EsnHyperParams {
            n_reservoir: self.n_reservoir,
            n_conn: self.n_conn,
            rho: self.rho.decode(u[0], true),
            sigma_in: self.sigma_in.decode(u[1], true),
            alpha: self.alpha.decode(u[2], false),
            tikhonov: self.tikhonov.decode(u[3], true),
            sigma_p: (0..n_p).map(|j| self.sigma_p[j].decode(u[4 + j], true)).collect(),
            k_p: (0..n_p).map(|j| self.k_p[j].decode(u[4 + n_p + j], false)).collect(),
            seed,
        }
    }

    pub fn encode(&self, h: &EsnHyperParams) -> Vec<f64> {
        let mut u = vec![
            self.rho.encode(h.rho, true),
            self.sigma_in.encode(h.sigma_in, true),
            self.alpha.encode(h.alpha, false),
            self.tikhonov.encode(h.tikhonov, true),
        ];
        u.extend(h.sigma_p.iter().zip(&self.sigma_p).map(|(v, b)| b.encode(*v, true)));
        u.extend(h.k_p.iter().zip(&self.k_p).map(|(v, b)| b.encode(*v, false)));
        u
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSettings {
    /// Closed-loop horizon per fold, in Lyapunov times.
    pub horizon_lt: f64,
    /// Forecast start points per validation regime.
    pub n_folds: usize,
    pub washout_steps: usize,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self { horizon_lt: 2.0, n_folds: 4, washout_steps: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeScore {
    pub regime: Vec<f64>,
    pub realisation: usize,
    pub seed: u64,
    /// Fold-averaged normalized mean squared error, or the penalty.
    pub error: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub candidate_index: usize,
    pub hyper: EsnHyperParams,
    pub per_regime: Vec<RegimeScore>,
    /// Mean over regimes and realisations; `None` when training failed.
    pub score: Option<f64>,
    pub failure: Option<String>,
}

impl ValidationReport {
    pub fn is_feasible(&self) -> bool {
        self.score.is_some()
    }

    /// Seed of the realisation with the lowest mean error.
    pub fn best_realisation_seed(&self) -> u64 {
        let mut by_seed: Vec<(u64, f64, usize)> = Vec::new();
        for s in &self.per_regime {
            match by_seed.iter_mut().find(|(seed, _, _)| *seed == s.seed) {
                Some(entry) => {
                    entry.1 += s.error;
                    entry.2 += 1;
                }
                None => by_seed.push((s.seed, s.error, 1)),
            }
        }
        by_seed
            .into_iter()
            .map(|(seed, sum, n)| (seed, sum / n as f64))
            .fold(None, |best: Option<(u64, f64)>, (seed, e)| match best {
                Some((_, b)) if b <= e => best,
                _ => Some((seed, e)),
            })
            .map(|(seed, _)| seed)
            .unwrap_or(self.hyper.seed)
    }
}

/// Seeds of the network realisations shared by every candidate.
pub fn realisation_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| crate::seed::derive_seed(seed, "realisation", k)).collect()
}

/// Normalized closed-loop error of one fold: washout on
/// `series[start..start + washout]`, then `horizon` autonomous steps.
fn fold_error(
    esn: &Esn,
    ds: &RegimeDataset,
    series: &[Vec<f64>],
    start: usize,
    washout: usize,
    horizon: usize,
) -> Option<f64> {
    let truth = &series[start + washout..start + washout + horizon];
    let norm2 = truth.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / horizon as f64;
    let r0 = esn.washout(&series[start..start + washout], &ds.regime).ok()?;
    let mut sq = 0.0;
    // the washed-out state predicts truth[0]; the loop continues from there
    let first = esn.readout(&r0).ok()?;
    sq += first.iter().zip(&truth[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let run = esn.run_closed_loop(&r0, horizon - 1, &ds.regime, |i, _, y| {
        let off = y.iter().zip(&esn.output_bound).any(|(v, b)| !v.is_finite() || v.abs() > DIVERGENCE_FACTOR * b);
        if off {
            return Err(Error::DivergedAttractor { step: i });
        }
        sq += y.iter().zip(&truth[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Ok(())
    });
    run.ok()?;
    let e = sq / horizon as f64 / norm2;
    e.is_finite().then_some(e)
}

fn regime_error(esn: &Esn, ds: &RegimeDataset, settings: &ValidationSettings) -> Result<Option<f64>> {
    let lt = ds.lyapunov_time.ok_or_else(|| Error::Config("validation regimes need a Lyapunov time".into()))?;
    let series = ds.full_series();
    let horizon = ((settings.horizon_lt * lt / ds.dt).round() as usize).max(1);
    let washout = settings.washout_steps;
    if washout + horizon > series.len() {
        return Err(Error::Config(format!(
            "validation series of {} steps is shorter than washout {washout} plus horizon {horizon}",
            series.len()
        )));
    }
    let room = series.len() - washout - horizon;
    let folds = settings.n_folds.max(1);
    let mut total = 0.0;
    for k in 0..folds {
        let start = if folds == 1 { 0 } else { room * k / (folds - 1) };
        match fold_error(esn, ds, &series, start, washout, horizon) {
            Some(e) => total += e,
            None => return Ok(None),
        }
    }
    Ok(Some(total / folds as f64))
}

/// Trains one realisation per seed and scores it on every validation regime.
pub fn validation_score(
    candidate: &EsnHyperParams,
    train_data: &[RegimeDataset],
    val_data: &[RegimeDataset],
    settings: &ValidationSettings,
    seeds: &[u64],
) -> Result<ValidationReport> {
    if val_data.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if train_data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut report = ValidationReport {
        candidate_index: 0,
        hyper: candidate.clone(),
        per_regime: Vec::new(),
        score: None,
        failure: None,
    };
    let n_y = train_data[0].train_series[0].len();
    let n_p = train_data[0].regime.len();
    for (realisation, &seed) in seeds.iter().enumerate() {
        let hyper = EsnHyperParams { seed, ..candidate.clone() };
        let trained = Esn::new(hyper, n_y, n_p).and_then(|mut esn| esn.train(train_data).map(|_| esn));
        let esn = match trained {
            Ok(esn) => esn,
            Err(e @ (Error::Config(_) | Error::Shape(_))) => return Err(e),
            Err(e) => {
                report.failure = Some(e.to_string());
                report.per_regime.clear();
                return Ok(report);
            }
        };
        for ds in val_data {
            let (error, diverged) = match regime_error(&esn, ds, settings)? {
                Some(e) => (e, false),
                None => (DIVERGED_PENALTY, true),
            };
            report.per_regime.push(RegimeScore { regime: ds.regime.p.clone(), realisation, seed, error, diverged });
        }
    }
    let n = report.per_regime.len() as f64;
    report.score = Some(report.per_regime.iter().map(|s| s.error).sum::<f64>() / n);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Winner, carrying the seed of its best realisation.
    pub best: EsnHyperParams,
    pub best_index: usize,
    pub best_score: f64,
    pub history: Vec<ValidationReport>,
}

fn random_candidate(space: &SearchSpace, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = crate::seed::rng(seed, "candidate", index as u64);
    (0..space.dims()).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Seeded random search with optional local refinement.
///
/// The winner minimizes the score (ties go to the lower candidate index);
/// infeasible candidates never win.
pub fn search(
    space: &SearchSpace,
    train_data: &[RegimeDataset],
    val_data: &[RegimeDataset],
    settings: &ValidationSettings,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    if val_data.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let seeds = realisation_seeds(seed, space.n_network_realisations);
    let evaluate = |index: usize, u: &[f64]| -> Result<ValidationReport> {
        let hyper = space.decode(u, seeds[0]);
        let mut report = validation_score(&hyper, train_data, val_data, settings, &seeds)?;
        report.candidate_index = index;
        Ok(report)
    };

    let mut history: Vec<ValidationReport> = (0..space.budget)
        .into_par_iter()
        .map(|i| evaluate(i, &random_candidate(space, seed, i)))
        .collect::<Result<_>>()?;

    if let Some(refine) = space.refine.filter(|r| r.budget > 0) {
        let mut ranked: Vec<&ValidationReport> = history.iter().filter(|r| r.is_feasible()).collect();
        ranked.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap().then(a.candidate_index.cmp(&b.candidate_index)));
        let centers: Vec<Vec<f64>> = ranked.iter().take(refine.top_k.max(1)).map(|r| space.encode(&r.hyper)).collect();
        if !centers.is_empty() {
            let extra: Vec<ValidationReport> = (0..refine.budget)
                .into_par_iter()
                .map(|k| {
                    let mut rng = crate::seed::rng(seed, "refine", k as u64);
                    let center = &centers[k % centers.len()];
                    let u: Vec<f64> = center
                        .iter()
                        .map(|c| (c + refine.width * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
                        .collect();
                    evaluate(space.budget + k, &u)
                })
                .collect::<Result<_>>()?;
            history.extend(extra);
        }
    }

    let best = history.iter().filter_map(|r| r.score.map(|s| (s, r))).fold(
        None,
        |best: Option<(f64, &ValidationReport)>, (s, r)| match best {
            Some((b, _)) if b <= s => best,
            _ => Some((s, r)),
        },
    );
    match best {
        Some((score, report)) => Ok(SearchOutcome {
            best: EsnHyperParams { seed: report.best_realisation_seed(), ..report.hyper.clone() },
            best_index: report.candidate_index,
            best_score: score,
            history,
        }),
        None => Err(Error::SearchFailed { history }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_encode_round_trip() {
        let space = SearchSpace::lorenz_default();
        let u: Vec<f64> = (0..space.dims()).map(|i| (i as f64 + 0.5) / 12.0).collect();
        let h = space.decode(&u, 3);
        h.validate().unwrap();
        let back = space.encode(&h);
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_space_is_rejected() {
        let mut space = SearchSpace::lorenz_default();
        space.budget = 0;
        assert!(space.validate().is_err());
        let mut space = SearchSpace::lorenz_default();
        space.rho = Bounds::new(0.0, 1.0);
        assert!(space.validate().is_err());
        let mut space = SearchSpace::lorenz_default();
        space.alpha = Bounds::new(0.5, 1.5);
        assert!(space.validate().is_err());
    }

    #[test]
    fn candidate_stream_is_prefix_stable() {
        let space = SearchSpace::lorenz_default();
        assert_eq!(random_candidate(&space, 5, 3), random_candidate(&space, 5, 3));
        assert_ne!(random_candidate(&space, 5, 3), random_candidate(&space, 5, 4));
    }

    #[test]
    fn best_realisation_is_lowest_mean() {
        let score = |seed, error| RegimeScore { regime: vec![], realisation: 0, seed, error, diverged: false };
        let report = ValidationReport {
            candidate_index: 0,
            hyper: EsnHyperParams::desk_scale(),
            per_regime: vec![score(1, 0.5), score(1, 0.3), score(2, 0.2), score(2, 0.4)],
            score: Some(0.35),
            failure: None,
        };
        assert_eq!(report.best_realisation_seed(), 2);
    }
}
