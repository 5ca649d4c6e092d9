//! Parameter-aware echo state network.
//!
//! The reservoir update is
//!
//! ```text
//! r(i+1) = (1 - α) r(i) + α tanh(W_in [u(i); diag(σ_p)(p - k_p)] + W r(i))
//! ŷ(i+1) = W_out r(i+1)
//! ```
//!
//! where `u = (y_in - μ) / s` is the input standardized componentwise with
//! the training mean `μ` and standard deviation `s`. `W_out` maps reservoir
//! states to physical outputs, so [`Esn::readout`] is exactly linear and the
//! closed loop feeds back `u = (W_out r - μ) / s`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynsys::LorenzParams;
use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, PowerIteration, SparseMatrix};

/// Closed-loop outputs beyond this multiple of the largest training
/// magnitude mark a diverged attractor.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Normalized error at which a forecast stops counting as predictive.
pub const DEFAULT_PREDICTABILITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsnHyperParams {
    pub n_reservoir: usize,
    /// Nonzeros per row of `W`.
    pub n_conn: usize,
    /// Spectral radius of `W`.
    pub rho: f64,
    pub sigma_in: f64,
    /// Leak rate in `(0, 1]`.
    pub alpha: f64,
    /// Tikhonov regularization of the readout solve.
    #[serde(rename = "lambda")]
    pub tikhonov: f64,
    pub sigma_p: Vec<f64>,
    pub k_p: Vec<f64>,
    pub seed: u64,
}

impl EsnHyperParams {
    /// A 1200-unit Lorenz 63 network with a small input scaling.
    pub fn full_scale() -> Self {
        Self {
            n_reservoir: 1200,
            n_conn: 3,
            rho: 0.2201,
            sigma_in: 0.0679,
            alpha: 0.8853,
            tikhonov: 1e-10,
            sigma_p: vec![0.0028, 0.0015, 0.0393],
            k_p: vec![68.73, 84.81, 74.46],
            seed: 0,
        }
    }

    /// [`Self::full_scale`] on a 300-unit reservoir.
    pub fn desk_scale() -> Self {
        Self { n_reservoir: 300, ..Self::full_scale() }
    }

    pub fn n_params(&self) -> usize {
        self.sigma_p.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParams(m));
        if self.n_reservoir < 1 {
            return fail("n_reservoir must be at least 1".into());
        }
        if self.n_conn < 1 || self.n_conn > self.n_reservoir {
            return fail(format!("n_conn = {} outside [1, {}]", self.n_conn, self.n_reservoir));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return fail(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.sigma_in >= 0.0 && self.sigma_in.is_finite()) {
            return fail(format!("sigma_in must be non-negative, got {}", self.sigma_in));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.tikhonov >= 0.0 && self.tikhonov.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.tikhonov));
        }
        if self.sigma_p.len() != self.k_p.len() {
            return fail(format!("sigma_p has {} entries, k_p {}", self.sigma_p.len(), self.k_p.len()));
        }
        if self.sigma_p.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || self.k_p.iter().any(|k| !k.is_finite()) {
            return fail("sigma_p must be non-negative and k_p finite".into());
        }
        Ok(())
    }
}

/// Physical parameter vector `p` fed to the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub p: Vec<f64>,
}

impl RegimeParams {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite regime {p:?}")));
        }
        Ok(Self { p })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Copy with `p[index] += delta`.
    pub fn perturbed(&self, index: usize, delta: f64) -> Self {
        let mut p = self.p.clone();
        p[index] += delta;
        Self { p }
    }
}

impl From<LorenzParams> for RegimeParams {
    fn from(l: LorenzParams) -> Self {
        Self { p: l.to_array().to_vec() }
    }
}

pub type ReservoirState = DVector<f64>;

/// Washout and training data of one regime, in physical output units.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeDataset {
    pub regime: RegimeParams,
    pub washout_series: Vec<Vec<f64>>,
    pub train_series: Vec<Vec<f64>>,
    pub dt: f64,
    pub lyapunov_time: Option<f64>,
}

impl RegimeDataset {
    pub fn validate(&self) -> Result<()> {
        if self.washout_series.is_empty() || self.train_series.len() < 2 {
            return Err(Error::Config("washout and train series must be non-empty".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dataset dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// Washout followed by training data.
    pub fn full_series(&self) -> Vec<Vec<f64>> {
        self.washout_series.iter().chain(&self.train_series).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirMatrices {
    /// `N_r × (N_y + N_p)`, `[W_in^y W_in^p]`.
    pub w_in: SparseMatrix,
    pub w: SparseMatrix,
    /// `N_y × N_r`, absent until trained.
    pub w_out: Option<DMatrix<f64>>,
    pub n_y: usize,
    pub n_p: usize,
}

impl ReservoirMatrices {
    pub fn w_in_y(&self) -> DMatrix<f64> {
        self.w_in.columns_dense(0..self.n_y)
    }

    pub fn w_in_p(&self) -> DMatrix<f64> {
        self.w_in.columns_dense(self.n_y..self.n_y + self.n_p)
    }
}

/// Draws `W_in` and `W`.
///
/// `W` gets `n_conn` distinct uniform(-1, 1) entries per row and is rescaled
/// to spectral radius `rho`; each row of `W_in` carries one
/// uniform(-σ_in, σ_in) entry in a column chosen uniformly over all
/// `n_y + n_p` inputs.
pub fn build_reservoir(hyper: &EsnHyperParams, n_y: usize, n_p: usize) -> Result<ReservoirMatrices> {
    hyper.validate()?;
    if hyper.n_params() != n_p {
        return Err(Error::Shape(format!("hyperparameters carry {} parameters, expected {n_p}", hyper.n_params())));
    }
    let n = hyper.n_reservoir;
    let mut rng = crate::seed::rng(hyper.seed, "reservoir-w", 0);
    let rows = (0..n)
        .map(|_| {
            rand::seq::index::sample(&mut rng, n, hyper.n_conn)
                .into_iter()
                .map(|c| (c, rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let mut w = SparseMatrix::from_rows(n, rows)?;
    let radius = spectral_radius(&w, PowerIteration { seed: hyper.seed, ..Default::default() })?;
    if radius == 0.0 {
        return Err(Error::InvalidParams("reservoir matrix is nilpotent; redraw with another seed".into()));
    }
    w.scale(hyper.rho / radius);

    let mut rng = crate::seed::rng(hyper.seed, "reservoir-w-in", 0);
    let n_in = n_y + n_p;
    let rows = (0..n)
        .map(|_| {
            let c = rng.random_range(0..n_in);
            let v = if hyper.sigma_in > 0.0 { rng.random_range(-hyper.sigma_in..hyper.sigma_in) } else { 0.0 };
            vec![(c, v)]
        })
        .collect();
    let w_in = SparseMatrix::from_rows(n_in, rows)?;
    Ok(ReservoirMatrices { w_in, w, w_out: None, n_y, n_p })
}

/// `[y_in; σ_p ⊙ (p - k_p)]`
pub fn augment_input(y_in: &[f64], p: &RegimeParams, hyper: &EsnHyperParams) -> Result<DVector<f64>> {
    if p.len() != hyper.n_params() {
        return Err(Error::Shape(format!("regime has {} parameters, network expects {}", p.len(), hyper.n_params())));
    }
    let param_block = p.p.iter().zip(&hyper.sigma_p).zip(&hyper.k_p).map(|((p, s), k)| s * (p - k));
    Ok(DVector::from_iterator(y_in.len() + p.len(), y_in.iter().copied().chain(param_block)))
}

/// Reservoir states `r(0..=N)` of a closed-loop run at one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirTrajectory {
    pub states: Vec<ReservoirState>,
    pub regime: RegimeParams,
}

impl ReservoirTrajectory {
    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoop {
    /// `ŷ(1..=N)` in physical units.
    pub outputs: Vec<DVector<f64>>,
    pub trajectory: ReservoirTrajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub n_samples: usize,
    /// `‖(RRᵀ + λI) W_outᵀ - RYᵀ‖ / ‖RYᵀ‖`
    pub normal_residual: f64,
    /// Root-mean-square one-step error, in output units.
    pub train_rmse: f64,
    /// Whether the eigenvalue-clipped fallback replaced the Cholesky solve.
    pub used_fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Esn {
    pub hyper: EsnHyperParams,
    pub mats: ReservoirMatrices,
    /// Training mean subtracted from each input component.
    pub input_shift: Vec<f64>,
    /// Training standard deviation dividing each input component.
    pub input_scale: Vec<f64>,
    /// Largest training magnitude per output.
    pub output_bound: Vec<f64>,
}

impl Esn {
    pub fn new(hyper: EsnHyperParams, n_y: usize, n_p: usize) -> Result<Self> {
        let mats = build_reservoir(&hyper, n_y, n_p)?;
        Ok(Self {
            hyper,
            mats,
            input_shift: vec![0.0; n_y],
            input_scale: vec![1.0; n_y],
            output_bound: vec![f64::INFINITY; n_y],
        })
    }

    pub fn n_reservoir(&self) -> usize {
        self.hyper.n_reservoir
    }

    pub fn n_y(&self) -> usize {
        self.mats.n_y
    }

    pub fn n_p(&self) -> usize {
        self.mats.n_p
    }

    pub fn is_trained(&self) -> bool {
        self.mats.w_out.is_some()
    }

    pub fn w_out(&self) -> Result<&DMatrix<f64>> {
        self.mats.w_out.as_ref().ok_or(Error::NotTrained)
    }

    /// `σ_p ⊙ (p - k_p)`
    pub(crate) fn param_input(&self, p: &RegimeParams) -> Result<Vec<f64>> {
        if p.len() != self.n_p() {
            return Err(Error::Shape(format!("regime has {} parameters, network expects {}", p.len(), self.n_p())));
        }
        Ok(p.p.iter().zip(&self.hyper.sigma_p).zip(&self.hyper.k_p).map(|((p, s), k)| s * (p - k)).collect())
    }

    fn scale_input(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_y() {
            return Err(Error::Shape(format!("input has {} components, network expects {}", y.len(), self.n_y())));
        }
        Ok(y.iter().enumerate().map(|(c, v)| (v - self.input_shift[c]) / self.input_scale[c]).collect())
    }

    /// Reservoir update with a network-space input `u` and a precomputed parameter block.
    pub(crate) fn step_scaled(&self, r: &[f64], u: &[f64], param_input: &[f64], out: &mut [f64]) {
        let (row_ptr, col_idx, values) = self.mats.w_in.raw_parts();
        let n_y = self.n_y();
        let alpha = self.hyper.alpha;
        let (w_ptr, w_col, w_val) = self.mats.w.raw_parts();
        for i in 0..r.len() {
            let mut pre = 0.0;
            for k in row_ptr[i]..row_ptr[i + 1] {
                let c = col_idx[k];
                pre += values[k] * if c < n_y { u[c] } else { param_input[c - n_y] };
            }
            for k in w_ptr[i]..w_ptr[i + 1] {
                pre += w_val[k] * r[w_col[k]];
            }
            out[i] = (1.0 - alpha) * r[i] + alpha * pre.tanh();
        }
    }

    /// One reservoir update driven by the physical input `y_in`.
    pub fn step(&self, r: &ReservoirState, y_in: &[f64], p: &RegimeParams) -> Result<ReservoirState> {
        self.check_state(r)?;
        let u = self.scale_input(y_in)?;
        let pin = self.param_input(p)?;
        let mut out = DVector::zeros(r.len());
        self.step_scaled(r.as_slice(), &u, &pin, out.as_mut_slice());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::StateBlowup { step: 0 });
        }
        Ok(out)
    }

    fn check_state(&self, r: &ReservoirState) -> Result<()> {
        if r.len() != self.n_reservoir() {
            return Err(Error::Shape(format!(
                "reservoir state has {} units, expected {}",
                r.len(),
                self.n_reservoir()
            )));
        }
        Ok(())
    }

    /// `diag(1/s) W_out`: how a reservoir perturbation reaches the next input.
    pub fn feedback_gain(&self, w_out: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = w_out.clone();
        for (c, s) in self.input_scale.iter().enumerate() {
            g.row_mut(c).scale_mut(1.0 / s);
        }
        g
    }

    /// `W_out r`
    pub(crate) fn readout_into(&self, w_out: &DMatrix<f64>, r: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..r.len()).map(|j| w_out[(c, j)] * r[j]).sum();
        }
    }

    /// `ŷ = W_out r`
    pub fn readout(&self, r: &ReservoirState) -> Result<DVector<f64>> {
        let w_out = self.w_out()?;
        self.check_state(r)?;
        let mut out = DVector::zeros(self.n_y());
        self.readout_into(w_out, r.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Teacher-forced run; returns `r(1..=N)`.
    pub fn open_loop(&self, r0: &ReservoirState, y_seq: &[Vec<f64>], p: &RegimeParams) -> Result<Vec<ReservoirState>> {
        if y_seq.is_empty() {
            return Err(Error::Config("open loop needs at least one input".into()));
        }
        self.check_state(r0)?;
        let pin = self.param_input(p)?;
        let mut states = Vec::with_capacity(y_seq.len());
        let mut r = r0.clone();
        for (i, y) in y_seq.iter().enumerate() {
            let u = self.scale_input(y)?;
            let mut next = DVector::zeros(r.len());
            self.step_scaled(r.as_slice(), &u, &pin, next.as_mut_slice());
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::StateBlowup { step: i });
            }
            states.push(next.clone());
            r = next;
        }
        Ok(states)
    }

    /// Final state of a teacher-forced washout from `r = 0`.
    pub fn washout(&self, y_seq: &[Vec<f64>], p: &RegimeParams) -> Result<ReservoirState> {
        let zero = DVector::zeros(self.n_reservoir());
        if y_seq.is_empty() {
            return Ok(zero);
        }
        let pin = self.param_input(p)?;
        let mut r = zero;
        let mut next = DVector::zeros(self.n_reservoir());
        for (i, y) in y_seq.iter().enumerate() {
            let u = self.scale_input(y)?;
            self.step_scaled(r.as_slice(), &u, &pin, next.as_mut_slice());
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::StateBlowup { step: i });
            }
            std::mem::swap(&mut r, &mut next);
        }
        Ok(r)
    }

    /// Autonomous run feeding the readout back as input.
    ///
    /// `visit(i, r(i), ŷ(i))` sees every new state and its physical output,
    /// `i = 1..=n_steps`, and may stop the run with an error.
    pub fn run_closed_loop(
        &self,
        r0: &ReservoirState,
        n_steps: usize,
        p: &RegimeParams,
        mut visit: impl FnMut(usize, &[f64], &[f64]) -> Result<()>,
    ) -> Result<ReservoirState> {
        let w_out = self.w_out()?;
        self.check_state(r0)?;
        let pin = self.param_input(p)?;
        let mut r = r0.clone();
        let mut next = DVector::zeros(r.len());
        let mut u = vec![0.0; self.n_y()];
        let mut y = vec![0.0; self.n_y()];
        self.readout_into(w_out, r.as_slice(), &mut y);
        for i in 1..=n_steps {
            for c in 0..y.len() {
                u[c] = (y[c] - self.input_shift[c]) / self.input_scale[c];
            }
            self.step_scaled(r.as_slice(), &u, &pin, next.as_mut_slice());
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::StateBlowup { step: i });
            }
            std::mem::swap(&mut r, &mut next);
            self.readout_into(w_out, r.as_slice(), &mut y);
            visit(i, r.as_slice(), &y)?;
        }
        Ok(r)
    }

    /// Autonomous run keeping the outputs and the full reservoir trajectory.
    pub fn closed_loop(&self, r0: &ReservoirState, n_steps: usize, p: &RegimeParams) -> Result<ClosedLoop> {
        let mut outputs = Vec::with_capacity(n_steps);
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(r0.clone());
        self.run_closed_loop(r0, n_steps, p, |_, r, y| {
            states.push(DVector::from_column_slice(r));
            outputs.push(DVector::from_column_slice(y));
            Ok(())
        })?;
        Ok(ClosedLoop { outputs, trajectory: ReservoirTrajectory { states, regime: p.clone() } })
    }

    /// Teacher-forced states `R` (rows = samples) and next-step targets `Y`.
    ///
    /// After the washout the state predicts the first training sample; each
    /// further state is obtained by feeding the previous training sample.
    pub fn teacher_forced_states(&self, ds: &RegimeDataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        ds.validate()?;
        let n = self.n_reservoir();
        let m = ds.train_series.len();
        let mut r_mat = DMatrix::zeros(m, n);
        let mut y_mat = DMatrix::zeros(m, self.n_y());
        let mut r = self.washout(&ds.washout_series, &ds.regime)?;
        let pin = self.param_input(&ds.regime)?;
        let mut next = DVector::zeros(n);
        for (k, target) in ds.train_series.iter().enumerate() {
            if k > 0 {
                let u = self.scale_input(&ds.train_series[k - 1])?;
                self.step_scaled(r.as_slice(), &u, &pin, next.as_mut_slice());
                std::mem::swap(&mut r, &mut next);
            }
            r_mat.row_mut(k).copy_from(&r.transpose());
            if target.len() != self.n_y() {
                return Err(Error::Shape(format!("target has {} components, expected {}", target.len(), self.n_y())));
            }
            for (c, v) in target.iter().enumerate() {
                y_mat[(k, c)] = *v;
            }
        }
        Ok((r_mat, y_mat))
    }

    /// Ridge regression of the readout over all regimes.
    ///
    /// Input standardization is set from the training series first, then
    /// `(RRᵀ + λI) W_outᵀ = RYᵀ` is solved by Cholesky. If the factorization
    /// fails with `λ > 0` an eigenvalue-clipped pseudo-solve is used; with
    /// `λ = 0` the failure is reported as [`Error::IllConditioned`].
    pub fn train(&mut self, datasets: &[RegimeDataset]) -> Result<TrainingReport> {
        if datasets.is_empty() {
            return Err(Error::Config("training needs at least one regime".into()));
        }
        for ds in datasets {
            ds.validate()?;
        }
        self.set_input_standardization(datasets)?;
        let n = self.n_reservoir();
        let n_y = self.n_y();
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DMatrix::zeros(n, n_y);
        let mut parts = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let (r_mat, y_mat) = self.teacher_forced_states(ds)?;
            a.gemm_tr(1.0, &r_mat, &r_mat, 1.0);
            rhs.gemm_tr(1.0, &r_mat, &y_mat, 1.0);
            parts.push((r_mat, y_mat));
        }
        for i in 0..n {
            a[(i, i)] += self.hyper.tikhonov;
        }
        let (x, used_fallback) = match a.clone().cholesky() {
            Some(chol) => (chol.solve(&rhs), false),
            None if self.hyper.tikhonov == 0.0 => return Err(Error::IllConditioned),
            None => (clipped_solve(&a, &rhs), true),
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::IllConditioned);
        }
        let normal_residual = (&a * &x - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE);
        let w_out = x.transpose();
        let mut sq = 0.0;
        let mut count = 0;
        for (r_mat, y_mat) in &parts {
            let pred = r_mat * w_out.transpose();
            sq += (pred - y_mat).norm_squared();
            count += y_mat.len();
        }
        self.mats.w_out = Some(w_out);
        Ok(TrainingReport {
            n_samples: parts.iter().map(|(r, _)| r.nrows()).sum(),
            normal_residual,
            train_rmse: (sq / count as f64).sqrt(),
            used_fallback,
        })
    }

    fn set_input_standardization(&mut self, datasets: &[RegimeDataset]) -> Result<()> {
        let n_y = self.n_y();
        let mut sum = vec![0.0; n_y];
        let mut sq = vec![0.0; n_y];
        let mut bound = vec![0.0f64; n_y];
        let mut count = 0usize;
        for y in datasets.iter().flat_map(|d| &d.train_series) {
            if y.len() != n_y {
                return Err(Error::Shape(format!("sample has {} components, expected {n_y}", y.len())));
            }
            for c in 0..n_y {
                sum[c] += y[c];
                sq[c] += y[c] * y[c];
                bound[c] = bound[c].max(y[c].abs());
            }
            count += 1;
        }
        let count = count as f64;
        self.input_shift = sum.iter().map(|s| s / count).collect();
        self.input_scale = (0..n_y)
            .map(|c| {
                let mean = self.input_shift[c];
                let std = (sq[c] / count - mean * mean).max(0.0).sqrt();
                if std > 0.0 {
                    std
                } else {
                    1.0
                }
            })
            .collect();
        self.output_bound = bound;
        Ok(())
    }

    fn check_bounds(&self, step: usize, y: &[f64]) -> Result<()> {
        let out = y.iter().zip(&self.output_bound).any(|(v, b)| !v.is_finite() || v.abs() > DIVERGENCE_FACTOR * b);
        if out {
            Err(Error::DivergedAttractor { step })
        } else {
            Ok(())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        archive::write(self, &mut file)?;
        file.flush()?;
        let sidecar = ModelHeader::of(self);
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        archive::read(&mut file)
    }
}

fn clipped_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = top * f64::EPSILON * a.nrows() as f64;
    let proj = eig.eigenvectors.transpose() * rhs;
    let mut scaled = proj;
    for (i, mu) in eig.eigenvalues.iter().enumerate() {
        let f = if *mu > cutoff { 1.0 / mu } else { 0.0 };
        scaled.row_mut(i).scale_mut(f);
    }
    &eig.eigenvectors * scaled
}

/// Time until the normalized forecast error first exceeds `threshold`, in
/// Lyapunov times.
///
/// The network is washed out on `truth[..washout_steps]`; the state reached
/// predicts `truth[washout_steps]` (time zero) and the closed loop continues
/// from there. The error is `‖ŷ - y‖ / sqrt(mean ‖y‖²)` with the mean taken
/// over the forecast window. A forecast that never crosses the threshold
/// returns the full window.
pub fn predictability_horizon(
    esn: &Esn,
    regime: &RegimeParams,
    truth: &[Vec<f64>],
    washout_steps: usize,
    dt: f64,
    lyapunov_time: f64,
    threshold: f64,
) -> Result<f64> {
    if truth.len() <= washout_steps {
        return Err(Error::Config("truth shorter than the washout".into()));
    }
    let target = &truth[washout_steps..];
    let norm = (target.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / target.len() as f64).sqrt();
    let r0 = esn.washout(&truth[..washout_steps], regime)?;
    let error = |pred: &[f64], y: &[f64]| -> f64 {
        pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / norm
    };
    let first = esn.readout(&r0)?;
    if !(error(first.as_slice(), &target[0]) <= threshold) {
        return Ok(0.0);
    }
    let mut crossed = None;
    let run = esn.run_closed_loop(&r0, target.len() - 1, regime, |i, _, y| {
        if !(error(y, &target[i]) <= threshold) {
            crossed = Some(i);
            return Err(Error::DivergedAttractor { step: i });
        }
        Ok(())
    });
    let steps = match (run, crossed) {
        (Ok(_), _) => target.len(),
        (Err(_), Some(i)) => i,
        (Err(e), None) => return Err(e),
    };
    Ok(steps as f64 * dt / lyapunov_time)
}

/// Mean of [`predictability_horizon`] over several truth segments.
pub fn mean_predictability_horizon(
    esn: &Esn,
    regime: &RegimeParams,
    truths: &[Vec<Vec<f64>>],
    washout_steps: usize,
    dt: f64,
    lyapunov_time: f64,
    threshold: f64,
) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::Config("no truth segments given".into()));
    }
    let mut total = 0.0;
    for t in truths {
        total += predictability_horizon(esn, regime, t, washout_steps, dt, lyapunov_time, threshold)?;
    }
    Ok(total / truths.len() as f64)
}

/// How the reservoir is synchronized before a statistics run.
#[derive(Clone, Debug, PartialEq)]
pub enum WashoutProtocol {
    /// Teacher forcing on a true-system segment.
    TrueSeries(Vec<Vec<f64>>),
    /// The same input fed repeatedly.
    RepeatedInput { input: Vec<f64>, steps: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    /// Probability mass per bin; out-of-range samples fall in the end bins.
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn from_samples(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut mass = vec![0.0; bins.max(1)];
        let width = (hi - lo) / mass.len() as f64;
        for v in values {
            let k = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            let k = k.clamp(0.0, (mass.len() - 1) as f64) as usize;
            mass[k] += 1.0;
        }
        let n = values.len().max(1) as f64;
        mass.iter_mut().for_each(|m| *m /= n);
        Self { lo, hi, mass }
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.mass.len() as f64;
        (0..self.mass.len()).map(|k| self.lo + (k as f64 + 0.5) * w).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTermStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub histograms: Vec<Histogram>,
    pub n_samples: usize,
}

impl LongTermStats {
    /// Statistics of `samples` (one inner vector per time step).
    pub fn from_samples(samples: &[Vec<f64>], bins: usize, ranges: Option<&[(f64, f64)]>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::EmptyStatistics);
        };
        let n_y = first.len();
        let n = samples.len() as f64;
        let mut mean = Vec::with_capacity(n_y);
        let mut std = Vec::with_capacity(n_y);
        let mut histograms = Vec::with_capacity(n_y);
        for c in 0..n_y {
            let col: Vec<f64> = samples.iter().map(|y| y[c]).collect();
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let (lo, hi) = match ranges {
                Some(r) => r[c],
                None => col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x))),
            };
            mean.push(m);
            std.push(v.sqrt());
            histograms.push(Histogram::from_samples(&col, lo, hi, bins));
        }
        Ok(Self { mean, std, histograms, n_samples: samples.len() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongTermConfig {
    pub duration_lt: f64,
    pub lyapunov_time: f64,
    pub dt: f64,
    /// Closed-loop steps discarded after the washout.
    pub transient_steps: usize,
    pub bins: usize,
    pub ranges: Option<Vec<(f64, f64)>>,
}

/// Closed-loop statistics over `duration_lt` Lyapunov times.
///
/// Outputs leaving [`DIVERGENCE_FACTOR`] times the training range abort the
/// run with [`Error::DivergedAttractor`].
pub fn long_term_stats(
    esn: &Esn,
    regime: &RegimeParams,
    config: &LongTermConfig,
    protocol: &WashoutProtocol,
) -> Result<LongTermStats> {
    let n = (config.duration_lt * config.lyapunov_time / config.dt).round() as usize;
    if n == 0 {
        return Err(Error::EmptyStatistics);
    }
    let r0 = match protocol {
        WashoutProtocol::TrueSeries(series) => esn.washout(series, regime)?,
        WashoutProtocol::RepeatedInput { input, steps } => esn.washout(&vec![input.clone(); *steps], regime)?,
    };
    let mut samples = Vec::with_capacity(n);
    esn.run_closed_loop(&r0, config.transient_steps + n, regime, |i, _, y| {
        esn.check_bounds(i, y)?;
        if i > config.transient_steps {
            samples.push(y.to_vec());
        }
        Ok(())
    })?;
    LongTermStats::from_samples(&samples, config.bins, config.ranges.as_deref())
}

/// Human-readable part of a model archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub hyper: EsnHyperParams,
    pub n_y: usize,
    pub n_p: usize,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_bound: Vec<f64>,
    pub trained: bool,
}

impl ModelHeader {
    fn of(esn: &Esn) -> Self {
        Self {
            hyper: esn.hyper.clone(),
            n_y: esn.n_y(),
            n_p: esn.n_p(),
            input_shift: esn.input_shift.clone(),
            input_scale: esn.input_scale.clone(),
            output_bound: esn.output_bound.iter().map(|b| if b.is_finite() { *b } else { f64::MAX }).collect(),
            trained: esn.is_trained(),
        }
    }
}

/// Binary model archive, all integers and floats little-endian:
///
/// ```text
/// magic   8 bytes  "PESNARCH"
/// version u32      1
/// header  u64 length + UTF-8 JSON (ModelHeader)
/// count   u32      number of matrices
/// per matrix:
///   name  u32 length + UTF-8 ("w_in", "w", "w_out")
///   rows  u64, cols u64
///   data  rows*cols f64, row-major
/// ```
pub mod archive {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"PESNARCH";
    pub const VERSION: u32 = 1;

    pub fn write(esn: &Esn, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&ModelHeader::of(esn))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut mats = vec![("w_in", esn.mats.w_in.to_dense()), ("w", esn.mats.w.to_dense())];
        if let Some(w_out) = &esn.mats.w_out {
            mats.push(("w_out", w_out.clone()));
        }
        w.write_all(&(mats.len() as u32).to_le_bytes())?;
        for (name, m) in mats {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.nrows() as u64).to_le_bytes())?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())?;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_u32(r: &mut impl Read) -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(r: &mut impl Read) -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn bad(msg: &str) -> Error {
        Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
    }

    pub fn read(r: &mut impl Read) -> Result<Esn> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a model archive"));
        }
        if read_u32(r)? != VERSION {
            return Err(bad("unsupported archive version"));
        }
        let len = read_u64(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header)?;
        let count = read_u32(r)?;
        let mut w_in = None;
        let mut w = None;
        let mut w_out = None;
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let m = DMatrix::from_row_slice(rows, cols, &data);
            match name.as_slice() {
                b"w_in" => w_in = Some(SparseMatrix::from_dense(&m)),
                b"w" => w = Some(SparseMatrix::from_dense(&m)),
                b"w_out" => w_out = Some(m),
                _ => return Err(bad("unknown matrix in archive")),
            }
        }
        let (Some(w_in), Some(w)) = (w_in, w) else {
            return Err(bad("archive lacks w_in or w"));
        };
        let output_bound =
            header.output_bound.iter().map(|b| if *b == f64::MAX { f64::INFINITY } else { *b }).collect();
        Ok(Esn {
            hyper: header.hyper,
            mats: ReservoirMatrices { w_in, w, w_out, n_y: header.n_y, n_p: header.n_p },
            input_shift: header.input_shift,
            input_scale: header.input_scale,
            output_bound,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper(n: usize) -> EsnHyperParams {
        EsnHyperParams {
            n_reservoir: n,
            n_conn: 3.min(n),
            rho: 0.5,
            sigma_in: 0.5,
            alpha: 0.7,
            tikhonov: 1e-8,
            sigma_p: vec![0.1, 0.05],
            k_p: vec![1.0, -2.0],
            seed: 11,
        }
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let mut h = small_hyper(10);
        h.alpha = 0.0;
        assert!(h.validate().is_err());
        let mut h = small_hyper(10);
        h.n_conn = 11;
        assert!(h.validate().is_err());
        let mut h = small_hyper(10);
        h.sigma_p[0] = -1.0;
        assert!(h.validate().is_err());
        let mut h = small_hyper(10);
        h.k_p.pop();
        assert!(h.validate().is_err());
    }

    #[test]
    fn single_unit_reservoir_is_plus_minus_rho() {
        let h = EsnHyperParams { n_reservoir: 1, n_conn: 1, ..small_hyper(1) };
        let m = build_reservoir(&h, 2, 2).unwrap();
        let w = m.w.to_dense();
        assert!((w[(0, 0)].abs() - h.rho).abs() < 1e-12);
    }

    #[test]
    fn reservoir_is_deterministic_and_sparse() {
        let h = small_hyper(50);
        let a = build_reservoir(&h, 3, 2).unwrap();
        assert_eq!(a, build_reservoir(&h, 3, 2).unwrap());
        for i in 0..50 {
            assert_eq!(a.w.row_nnz(i), 3);
            assert_eq!(a.w_in.row_nnz(i), 1);
        }
        let other = build_reservoir(&EsnHyperParams { seed: 12, ..h }, 3, 2).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn augment_input_param_block() {
        let h = EsnHyperParams::full_scale();
        let p = RegimeParams::new(vec![10.0, 28.0, 8.0 / 3.0]).unwrap();
        let v = augment_input(&[1.0, 2.0, 3.0], &p, &h).unwrap();
        let expected = [1.0, 2.0, 3.0, -0.164444, -0.085215, -2.821478];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let at_shift = RegimeParams::new(h.k_p.clone()).unwrap();
        let v = augment_input(&[0.0; 3], &at_shift, &h).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let blind = EsnHyperParams { sigma_p: vec![0.0; 3], ..h.clone() };
        assert!(augment_input(&[0.0; 3], &p, &blind).unwrap().iter().all(|x| *x == 0.0));
        assert!(matches!(augment_input(&[0.0; 3], &RegimeParams::new(vec![1.0]).unwrap(), &h), Err(Error::Shape(_))));
    }

    #[test]
    fn step_matches_dense_assembly() {
        let esn = Esn::new(small_hyper(40), 3, 2).unwrap();
        let mut rng = crate::seed::rng(1, "test", 0);
        let r = DVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
        let y = [0.3, -1.2, 2.0];
        let p = RegimeParams::new(vec![0.4, 3.0]).unwrap();
        let next = esn.step(&r, &y, &p).unwrap();
        let aug = augment_input(&y, &p, &esn.hyper).unwrap();
        let pre = esn.mats.w_in.to_dense() * aug + esn.mats.w.to_dense() * &r;
        let expected = r.map(|v| (1.0 - 0.7) * v) + pre.map(|v| 0.7 * v.tanh());
        assert!((next - expected).amax() < 1e-14);
    }

    #[test]
    fn zero_matrices_and_full_leak_give_zero_state() {
        let mut esn = Esn::new(EsnHyperParams { alpha: 1.0, ..small_hyper(5) }, 3, 2).unwrap();
        esn.mats.w.scale(0.0);
        esn.mats.w_in.scale(0.0);
        let r = DVector::from_element(5, 0.3);
        let next = esn.step(&r, &[1.0, 2.0, 3.0], &RegimeParams::new(vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(next.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_leak_keeps_state() {
        // alpha = 0 is rejected by validation; exercise the map itself
        let mut esn = Esn::new(small_hyper(5), 3, 2).unwrap();
        esn.hyper.alpha = 0.0;
        let r = DVector::from_element(5, 0.3);
        let next = esn.step(&r, &[1.0, 2.0, 3.0], &RegimeParams::new(vec![5.0, 1.0]).unwrap()).unwrap();
        assert_eq!(next, r);
    }

    #[test]
    fn readout_requires_training_and_is_linear() {
        let mut esn = Esn::new(small_hyper(6), 2, 2).unwrap();
        let r = DVector::from_element(6, 0.1);
        assert!(matches!(esn.readout(&r), Err(Error::NotTrained)));
        esn.mats.w_out = Some(DMatrix::from_fn(2, 6, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5)));
        esn.input_shift = vec![1.0, -3.0];
        esn.input_scale = vec![2.0, 0.5];
        assert!(esn.readout(&DVector::zeros(6)).unwrap().iter().all(|v| *v == 0.0));
        let r1 = DVector::from_fn(6, |i, _| i as f64 * 0.1);
        let r2 = DVector::from_fn(6, |i, _| 1.0 - i as f64 * 0.3);
        let lhs = esn.readout(&(&r1 * 2.0 + &r2 * -3.0)).unwrap();
        let rhs = esn.readout(&r1).unwrap() * 2.0 + esn.readout(&r2).unwrap() * -3.0;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn open_loop_composes() {
        let esn = Esn::new(small_hyper(20), 2, 2).unwrap();
        let p = RegimeParams::new(vec![1.5, 0.5]).unwrap();
        let ys: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.3).sin(), (i as f64 * 0.2).cos()]).collect();
        let r0 = DVector::zeros(20);
        let full = esn.open_loop(&r0, &ys, &p).unwrap();
        let head = esn.open_loop(&r0, &ys[..12], &p).unwrap();
        let tail = esn.open_loop(head.last().unwrap(), &ys[12..], &p).unwrap();
        assert_eq!(full[..12], head[..]);
        assert_eq!(full[12..], tail[..]);
        let one = esn.open_loop(&r0, &ys[..1], &p).unwrap();
        assert_eq!(one, vec![esn.step(&r0, &ys[0], &p).unwrap()]);
        assert!(esn.open_loop(&r0, &[], &p).is_err());
    }

    #[test]
    fn closed_loop_edge_cases() {
        let mut esn = Esn::new(small_hyper(20), 2, 2).unwrap();
        let p = RegimeParams::new(vec![1.5, 0.5]).unwrap();
        let r0 = DVector::from_element(20, 0.05);
        assert!(matches!(esn.closed_loop(&r0, 3, &p), Err(Error::NotTrained)));
        esn.mats.w_out = Some(DMatrix::from_fn(2, 20, |i, j| 0.1 * ((i + j) as f64).sin()));
        let run = esn.closed_loop(&r0, 0, &p).unwrap();
        assert!(run.outputs.is_empty());
        assert_eq!(run.trajectory.states, vec![r0.clone()]);

        // feeding the network's own readouts open-loop reproduces the closed loop
        let run = esn.closed_loop(&r0, 25, &p).unwrap();
        let mut fed = vec![esn.readout(&r0).unwrap().as_slice().to_vec()];
        fed.extend(run.outputs[..24].iter().map(|y| y.as_slice().to_vec()));
        let open = esn.open_loop(&r0, &fed, &p).unwrap();
        for (a, b) in open.iter().zip(&run.trajectory.states[1..]) {
            assert!((a - b).amax() < 1e-14);
        }
    }

    #[test]
    fn parameter_blind_network_ignores_regime() {
        let mut h = small_hyper(20);
        h.sigma_p = vec![0.0, 0.0];
        let mut esn = Esn::new(h, 2, 2).unwrap();
        esn.mats.w_out = Some(DMatrix::from_fn(2, 20, |i, j| 0.2 * ((i * 7 + j) as f64).cos()));
        let r0 = DVector::from_element(20, 0.1);
        let a = esn.closed_loop(&r0, 40, &RegimeParams::new(vec![1.0, 2.0]).unwrap()).unwrap();
        let b = esn.closed_loop(&r0, 40, &RegimeParams::new(vec![-7.0, 30.0]).unwrap()).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    fn sine_dataset(phase: f64, p: Vec<f64>) -> RegimeDataset {
        let series = |off: usize, n: usize| -> Vec<Vec<f64>> {
            (off..off + n)
                .map(|i| {
                    let t = i as f64 * 0.05 + phase;
                    vec![t.sin(), (2.0 * t).cos()]
                })
                .collect()
        };
        RegimeDataset {
            regime: RegimeParams::new(p).unwrap(),
            washout_series: series(0, 50),
            train_series: series(50, 400),
            dt: 0.05,
            lyapunov_time: None,
        }
    }

    #[test]
    fn ridge_solution_satisfies_normal_equations() {
        let mut esn = Esn::new(EsnHyperParams { tikhonov: 1e-6, ..small_hyper(60) }, 2, 2).unwrap();
        let data = vec![sine_dataset(0.0, vec![1.0, 0.0]), sine_dataset(1.3, vec![0.5, 1.0])];
        let report = esn.train(&data).unwrap();
        assert!(report.normal_residual <= 1e-8, "{}", report.normal_residual);
        assert_eq!(report.n_samples, 800);
        assert!(report.train_rmse < 0.05);
    }

    #[test]
    fn ridge_optimum_is_not_improved_by_perturbation() {
        let mut esn = Esn::new(EsnHyperParams { tikhonov: 1e-4, ..small_hyper(40) }, 2, 2).unwrap();
        let data = vec![sine_dataset(0.2, vec![1.0, 0.0])];
        esn.train(&data).unwrap();
        let (r, y) = esn.teacher_forced_states(&data[0]).unwrap();
        let lambda = esn.hyper.tikhonov;
        let loss = |w: &DMatrix<f64>| (&r * w.transpose() - &y).norm_squared() + lambda * w.norm_squared();
        let w = esn.w_out().unwrap().clone();
        let base = loss(&w);
        for (i, j) in [(0, 0), (1, 5), (0, 17), (1, 39), (0, 22)] {
            for delta in [1e-6, -1e-6] {
                let mut p = w.clone();
                p[(i, j)] += delta;
                assert!(loss(&p) >= base, "entry ({i},{j}) {delta}");
            }
        }
    }

    #[test]
    fn singular_unregularized_training_is_reported() {
        // more units than samples: RRᵀ is rank deficient
        let mut esn = Esn::new(EsnHyperParams { tikhonov: 0.0, ..small_hyper(60) }, 2, 2).unwrap();
        let mut ds = sine_dataset(0.0, vec![1.0, 0.0]);
        ds.train_series.truncate(10);
        assert!(matches!(esn.train(&[ds.clone()]), Err(Error::IllConditioned)));
        let mut esn = Esn::new(EsnHyperParams { tikhonov: 1e-9, ..small_hyper(60) }, 2, 2).unwrap();
        assert!(esn.train(&[ds]).is_ok());
        assert!(esn.train(&[]).is_err());
    }

    #[test]
    fn exact_least_squares_with_zero_regularization() {
        let mut esn = Esn::new(EsnHyperParams { tikhonov: 0.0, ..small_hyper(30) }, 2, 2).unwrap();
        // aperiodic forcing so the state matrix has full column rank
        let mut data = vec![sine_dataset(0.0, vec![1.0, 0.0])];
        for (i, y) in data[0].train_series.iter_mut().enumerate() {
            let t = i as f64;
            y[0] += 0.5 * (0.37 * t * t).sin();
            y[1] += 0.5 * (1.3 * t).cos() * (0.011 * t * t).sin();
        }
        let report = esn.train(&data).unwrap();
        let (r, y) = esn.teacher_forced_states(&data[0]).unwrap();
        // the residual must be orthogonal to the span of the states
        let resid = &r * esn.w_out().unwrap().transpose() - &y;
        let grad = r.transpose() * &resid;
        assert!(grad.amax() <= 1e-8 * (r.transpose() * &y).amax(), "{}", grad.amax());
        assert!(report.normal_residual < 1e-8);
    }

    #[test]
    fn horizon_of_self_generated_truth_is_full_window() {
        let mut esn = Esn::new(small_hyper(30), 2, 2).unwrap();
        let data = vec![sine_dataset(0.0, vec![1.0, 0.0])];
        esn.train(&data).unwrap();
        let p = data[0].regime.clone();
        let r = esn.washout(&data[0].washout_series, &p).unwrap();
        let run = esn.closed_loop(&r, 300, &p).unwrap();
        let mut truth: Vec<Vec<f64>> = vec![esn.readout(&r).unwrap().as_slice().to_vec()];
        truth.extend(run.outputs.iter().map(|y| y.as_slice().to_vec()));
        let h = predictability_horizon(&esn, &p, &truth, 150, 0.05, 1.0, 0.5).unwrap();
        assert!((h - (truth.len() - 150) as f64 * 0.05).abs() < 1e-12, "{h}");

        let mut random = esn.clone();
        random.mats.w_out = Some(DMatrix::from_fn(2, 30, |i, j| 40.0 * ((i * 31 + j * 7) as f64).sin()));
        let h = predictability_horizon(&random, &p, &truth, 150, 0.05, 1.0, 0.5).unwrap();
        assert!(h < 0.2, "{h}");
    }

    #[test]
    fn histogram_mass_sums_to_one() {
        let h = Histogram::from_samples(&[0.0, 0.5, 1.0, 2.0, -3.0], 0.0, 1.0, 4);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(h.mass[0], 0.4);
        assert_eq!(h.mass[3], 0.4);
        assert!(matches!(LongTermStats::from_samples(&[], 10, None), Err(Error::EmptyStatistics)));
    }

    #[test]
    fn zero_duration_statistics_error() {
        let mut esn = Esn::new(small_hyper(10), 2, 2).unwrap();
        esn.train(&[sine_dataset(0.0, vec![1.0, 0.0])]).unwrap();
        esn.mats.w_out = Some(DMatrix::zeros(2, 10));
        let config = LongTermConfig {
            duration_lt: 0.0,
            lyapunov_time: 1.0,
            dt: 0.05,
            transient_steps: 0,
            bins: 10,
            ranges: None,
        };
        let p = RegimeParams::new(vec![1.0, 0.0]).unwrap();
        let protocol = WashoutProtocol::RepeatedInput { input: vec![0.0, 1.0], steps: 20 };
        assert!(matches!(long_term_stats(&esn, &p, &config, &protocol), Err(Error::EmptyStatistics)));
        let config = LongTermConfig { duration_lt: 5.0, ..config };
        let stats = long_term_stats(&esn, &p, &config, &protocol).unwrap();
        assert_eq!(stats.n_samples, 100);
        for h in &stats.histograms {
            assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut esn = Esn::new(small_hyper(25), 2, 2).unwrap();
        let untrained = esn.clone();
        let mut buf = Vec::new();
        archive::write(&untrained, &mut buf).unwrap();
        let back = archive::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, untrained);

        esn.train(&[sine_dataset(0.0, vec![1.0, 0.0])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pesn");
        esn.save(&path).unwrap();
        assert_eq!(Esn::load(&path).unwrap(), esn);
        let sidecar: ModelHeader =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(sidecar.hyper, esn.hyper);
        assert!(archive::read(&mut &b"NOTMODEL"[..]).is_err());
    }
}
