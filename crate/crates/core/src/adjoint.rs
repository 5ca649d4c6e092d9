//! Sensitivities of time-averaged objectives through the closed-loop network.
//!
//! For an autonomous run `r(0..=N)` at regime `p` and the objective
//! `J = (1/N) Σ_{i=1..N} J̃(r(i))`, the adjoint recursion is
//!
//! ```text
//! q(N) = (1/N) ∂J̃/∂r(N)ᵀ
//! q(i) = (1/N) ∂J̃/∂r(i)ᵀ + (∂r(i+1)/∂r(i))ᵀ q(i+1)
//! dJ/dp = Σ_{i=1..N} q(i)ᵀ ∂r(i)/∂p
//! ```
//!
//! with the step Jacobian `(1-α)I + α diag(1 - r̃²)(W_in^y W_out + W)` and the
//! local parameter derivative `α diag(1 - r̃²) W_in^p diag(σ_p)`, where
//! `r̃(i) = (r(i+1) - (1-α) r(i)) / α` is recovered from consecutive states.
//! The initial reservoir state is taken independent of `p`, so the tangent
//! recursion starts from `Q(0) = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esn::{Esn, RegimeParams, ReservoirState, ReservoirTrajectory};

/// Max-norm beyond which adjoint and tangent sweeps give up.
pub const DEFAULT_DIVERGENCE_CAP: f64 = 1e8;
/// Slack allowed on `|r̃| ≤ 1` when recovering tanh outputs.
const TANH_SLACK: f64 = 1e-8;

/// Which output component the objective averages. Defaults to `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub component: usize,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self { component: 2 }
    }
}

impl ObjectiveSpec {
    /// `∂J̃/∂r` for `J̃ = ŷ_c = (W_out r)_c`.
    pub fn reservoir_gradient(&self, esn: &Esn) -> Result<DVector<f64>> {
        let w_out = esn.w_out()?;
        if self.component >= esn.n_y() {
            return Err(Error::Config(format!("objective component {} out of range", self.component)));
        }
        Ok(w_out.row(self.component).transpose())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Adjoint,
    Tangent,
    FiniteDifference,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Adjoint => "adjoint",
            Method::Tangent => "tangent",
            Method::FiniteDifference => "finite-difference",
        }
    }
}

/// Gradient `dJ/dp` over one window of `window_steps` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityVector {
    pub djdp: Vec<f64>,
    pub window_steps: usize,
    pub method: Method,
}

/// `1 - r̃²` for the step `r(i) → r(i+1)`.
fn tanh_slope(esn: &Esn, r_i: &[f64], r_ip1: &[f64], step: usize) -> Result<Vec<f64>> {
    let alpha = esn.hyper.alpha;
    r_i.iter()
        .zip(r_ip1)
        .enumerate()
        .map(|(unit, (a, b))| {
            let t = (b - (1.0 - alpha) * a) / alpha;
            if t.abs() > 1.0 + TANH_SLACK || !t.is_finite() {
                Err(Error::InconsistentTrajectory { step, unit, value: t.abs() })
            } else {
                Ok((1.0 - t * t).max(0.0))
            }
        })
        .collect()
}

fn check_pair(esn: &Esn, r_i: &ReservoirState, r_ip1: &ReservoirState) -> Result<()> {
    let n = esn.n_reservoir();
    if r_i.len() != n || r_ip1.len() != n {
        return Err(Error::Shape(format!("states must have {n} units")));
    }
    Ok(())
}

/// Dense closed-loop step Jacobian `∂r(i+1)/∂r(i)`.
pub fn esn_step_jacobian(esn: &Esn, r_i: &ReservoirState, r_ip1: &ReservoirState) -> Result<DMatrix<f64>> {
    check_pair(esn, r_i, r_ip1)?;
    let w_out = esn.w_out()?;
    let alpha = esn.hyper.alpha;
    let d = tanh_slope(esn, r_i.as_slice(), r_ip1.as_slice(), 0)?;
    let mut m = esn.mats.w_in_y() * esn.feedback_gain(w_out) + esn.mats.w.to_dense();
    for (i, di) in d.iter().enumerate() {
        m.row_mut(i).scale_mut(alpha * di);
    }
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0 - alpha;
    }
    Ok(m)
}

/// Dense local parameter derivative `∂r(i+1)/∂p`.
pub fn esn_param_grad(esn: &Esn, r_i: &ReservoirState, r_ip1: &ReservoirState) -> Result<DMatrix<f64>> {
    check_pair(esn, r_i, r_ip1)?;
    let d = tanh_slope(esn, r_i.as_slice(), r_ip1.as_slice(), 0)?;
    let mut m = esn.mats.w_in_p();
    for (j, s) in esn.hyper.sigma_p.iter().enumerate() {
        m.column_mut(j).scale_mut(*s);
    }
    for (i, di) in d.iter().enumerate() {
        m.row_mut(i).scale_mut(esn.hyper.alpha * di);
    }
    Ok(m)
}

/// Matrix-free products with the step Jacobian and parameter derivative.
struct StepOperator<'a> {
    esn: &'a Esn,
    w_out: &'a DMatrix<f64>,
    /// `W_in^p diag(σ_p)`, dense `N_r × N_p`.
    w_in_p_scaled: DMatrix<f64>,
}

impl<'a> StepOperator<'a> {
    fn new(esn: &'a Esn) -> Result<Self> {
        let w_out = esn.w_out()?;
        let mut w_in_p_scaled = esn.mats.w_in_p();
        for (j, s) in esn.hyper.sigma_p.iter().enumerate() {
            w_in_p_scaled.column_mut(j).scale_mut(*s);
        }
        Ok(Self { esn, w_out, w_in_p_scaled })
    }

    /// `Jᵀ q` with `J = (1-α)I + diag(αd)(W_in^y diag(1/s) W_out + W)`.
    fn jacobian_tr_mul(&self, d: &[f64], q: &[f64], out: &mut [f64]) {
        let alpha = self.esn.hyper.alpha;
        let n_y = self.esn.n_y();
        let v: Vec<f64> = d.iter().zip(q).map(|(di, qi)| alpha * di * qi).collect();
        out.iter_mut().zip(q).for_each(|(o, qi)| *o = (1.0 - alpha) * qi);
        self.esn.mats.w.tr_mul_vec_add(&v, out);
        let mut inputs = vec![0.0; self.esn.mats.w_in.ncols()];
        self.esn.mats.w_in.tr_mul_vec_add(&v, &mut inputs);
        for (c, u) in inputs[..n_y].iter().enumerate() {
            let u = u / self.esn.input_scale[c];
            if u != 0.0 {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += self.w_out[(c, j)] * u;
                }
            }
        }
    }

    /// `J v`
    fn jacobian_mul(&self, d: &[f64], v: &[f64], out: &mut [f64]) {
        let alpha = self.esn.hyper.alpha;
        let n_y = self.esn.n_y();
        let mut aug = vec![0.0; self.esn.mats.w_in.ncols()];
        self.esn.readout_into(self.w_out, v, &mut aug[..n_y]);
        aug[..n_y].iter_mut().zip(&self.esn.input_scale).for_each(|(a, s)| *a /= s);
        let mut fb = vec![0.0; v.len()];
        self.esn.mats.w_in.mul_vec_into(&aug, &mut fb);
        let mut wv = vec![0.0; v.len()];
        self.esn.mats.w.mul_vec_into(v, &mut wv);
        for i in 0..v.len() {
            out[i] = (1.0 - alpha) * v[i] + alpha * d[i] * (fb[i] + wv[i]);
        }
    }

    /// `qᵀ ∂r/∂p` accumulated into `acc`.
    fn param_tr_mul_add(&self, d: &[f64], q: &[f64], acc: &mut [f64]) {
        let alpha = self.esn.hyper.alpha;
        for (i, (di, qi)) in d.iter().zip(q).enumerate() {
            let v = alpha * di * qi;
            if v != 0.0 {
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += self.w_in_p_scaled[(i, j)] * v;
                }
            }
        }
    }
}

/// Result of [`adjoint_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointResult {
    pub sensitivity: SensitivityVector,
    /// `q(1..=N)`; entry `k` holds `q(k + 1)`.
    pub adjoint: Vec<DVector<f64>>,
}

impl AdjointResult {
    /// Max-norm of `q(i)` for `i = 1..=N`.
    pub fn adjoint_norms(&self) -> Vec<f64> {
        self.adjoint.iter().map(|q| q.amax()).collect()
    }
}

fn check_trajectory(esn: &Esn, traj: &ReservoirTrajectory) -> Result<usize> {
    let n = traj.n_steps();
    if n == 0 {
        return Err(Error::Config("trajectory needs at least two states".into()));
    }
    if traj.regime.len() != esn.n_p() {
        return Err(Error::Shape("trajectory regime does not match the network".into()));
    }
    if traj.states.iter().any(|s| s.len() != esn.n_reservoir()) {
        return Err(Error::Shape("trajectory state size does not match the network".into()));
    }
    Ok(n)
}

/// Backward adjoint sweep along a recorded closed-loop trajectory.
pub fn adjoint_sweep(esn: &Esn, traj: &ReservoirTrajectory, objective: ObjectiveSpec) -> Result<AdjointResult> {
    adjoint_sweep_capped(esn, traj, objective, DEFAULT_DIVERGENCE_CAP)
}

pub fn adjoint_sweep_capped(
    esn: &Esn,
    traj: &ReservoirTrajectory,
    objective: ObjectiveSpec,
    cap: f64,
) -> Result<AdjointResult> {
    let n = check_trajectory(esn, traj)?;
    let op = StepOperator::new(esn)?;
    let source = objective.reservoir_gradient(esn)? / n as f64;
    let states = &traj.states;
    let mut djdp = vec![0.0; esn.n_p()];
    let mut adjoint = vec![DVector::zeros(0); n];

    let mut q = source.clone();
    let mut next = DVector::zeros(esn.n_reservoir());
    for i in (1..=n).rev() {
        if i < n {
            // q(i) = source + J(i)ᵀ q(i+1), J(i) from (r(i), r(i+1))
            let d = tanh_slope(esn, states[i].as_slice(), states[i + 1].as_slice(), i)?;
            op.jacobian_tr_mul(&d, q.as_slice(), next.as_mut_slice());
            next += &source;
            std::mem::swap(&mut q, &mut next);
        }
        let size = q.amax();
        if !(size <= cap) {
            return Err(Error::DivergedAdjoint { step: i, time: i as f64 });
        }
        // ∂r(i)/∂p from (r(i-1), r(i))
        let d = tanh_slope(esn, states[i - 1].as_slice(), states[i].as_slice(), i - 1)?;
        op.param_tr_mul_add(&d, q.as_slice(), &mut djdp);
        adjoint[i - 1] = q.clone();
    }
    Ok(AdjointResult { sensitivity: SensitivityVector { djdp, window_steps: n, method: Method::Adjoint }, adjoint })
}

/// Forward tangent sweep: `Q(i+1) = J(i) Q(i) + ∂r(i+1)/∂p`, `Q(0) = 0`.
///
/// Carries an `N_r × N_p` matrix, so its cost grows with the number of
/// parameters while [`adjoint_sweep`] carries a single `N_r` vector.
pub fn tangent_sweep(esn: &Esn, traj: &ReservoirTrajectory, objective: ObjectiveSpec) -> Result<SensitivityVector> {
    tangent_sweep_capped(esn, traj, objective, DEFAULT_DIVERGENCE_CAP)
}

pub fn tangent_sweep_capped(
    esn: &Esn,
    traj: &ReservoirTrajectory,
    objective: ObjectiveSpec,
    cap: f64,
) -> Result<SensitivityVector> {
    let n = check_trajectory(esn, traj)?;
    let op = StepOperator::new(esn)?;
    let grad = objective.reservoir_gradient(esn)?;
    let n_r = esn.n_reservoir();
    let n_p = esn.n_p();
    let alpha = esn.hyper.alpha;
    let mut q = DMatrix::<f64>::zeros(n_r, n_p);
    let mut next = DMatrix::<f64>::zeros(n_r, n_p);
    let mut acc = vec![0.0; n_p];
    for i in 0..n {
        let d = tanh_slope(esn, traj.states[i].as_slice(), traj.states[i + 1].as_slice(), i)?;
        for j in 0..n_p {
            let mut col = vec![0.0; n_r];
            if i > 0 {
                op.jacobian_mul(&d, q.column(j).as_slice(), &mut col);
            }
            for (k, c) in col.iter_mut().enumerate() {
                *c += alpha * d[k] * op.w_in_p_scaled[(k, j)];
            }
            next.column_mut(j).copy_from_slice(&col);
        }
        std::mem::swap(&mut q, &mut next);
        if !(q.amax() <= cap) {
            return Err(Error::DivergedTangent { step: i + 1 });
        }
        for (j, a) in acc.iter_mut().enumerate() {
            *a += grad.dot(&q.column(j));
        }
    }
    let djdp = acc.into_iter().map(|a| a / n as f64).collect();
    Ok(SensitivityVector { djdp, window_steps: n, method: Method::Tangent })
}

/// Closed-loop window average of the objective from `r0`.
pub fn window_objective(
    esn: &Esn,
    r0: &ReservoirState,
    regime: &RegimeParams,
    n_steps: usize,
    objective: ObjectiveSpec,
) -> Result<f64> {
    if n_steps == 0 {
        return Err(Error::Config("window needs at least one step".into()));
    }
    let c = objective.component;
    if c >= esn.n_y() {
        return Err(Error::Config(format!("objective component {c} out of range")));
    }
    let mut sum = 0.0;
    esn.run_closed_loop(r0, n_steps, regime, |_, _, y| {
        sum += y[c];
        Ok(())
    })?;
    Ok(sum / n_steps as f64)
}

/// Central differences of the window-averaged objective over each parameter,
/// all runs starting from the same `r0`.
pub fn finite_diff_sensitivity(
    esn: &Esn,
    r0: &ReservoirState,
    regime: &RegimeParams,
    n_steps: usize,
    objective: ObjectiveSpec,
    eps: f64,
) -> Result<SensitivityVector> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let djdp = (0..regime.len())
        .map(|j| {
            let plus = window_objective(esn, r0, &regime.perturbed(j, eps), n_steps, objective)?;
            let minus = window_objective(esn, r0, &regime.perturbed(j, -eps), n_steps, objective)?;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityVector { djdp, window_steps: n_steps, method: Method::FiniteDifference })
}
