//! Lorenz 63: simulation, Jacobians, attractor sampling, Lyapunov times and
//! the continuous adjoint used as ground truth for the network's sensitivities.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{Method, ObjectiveSpec, SensitivityVector};
use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 0.01;
/// Time discarded before any sampling or statistics.
pub const DEFAULT_TRANSIENT_TIME: f64 = 20.0;
/// Renormalization interval of the Lyapunov estimator, in time units.
pub const LYAPUNOV_RENORM_TIME: f64 = 1.0;
pub const LYAPUNOV_HORIZON_TIME: f64 = 1000.0;
/// Exponents at or below this count as non-chaotic. A periodic orbit leaves
/// a residual of order `1 / horizon` in the finite-time estimate.
pub const MIN_CHAOTIC_EXPONENT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub s: f64,
    pub r: f64,
    pub b: f64,
}

impl LorenzParams {
    pub fn new(s: f64, r: f64, b: f64) -> Result<Self> {
        let p = Self { s, r, b };
        p.validate()?;
        Ok(p)
    }

    /// `(s, r, b) = (10, 28, 8/3)`.
    pub fn reference() -> Self {
        Self { s: 10.0, r: 28.0, b: 8.0 / 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.r.is_finite() && self.b.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite Lorenz parameters {self:?}")));
        }
        if self.s <= 0.0 || self.b <= 0.0 {
            return Err(Error::InvalidParams(format!("s and b must be positive, got {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.r, self.b]
    }

    pub fn from_array(p: [f64; 3]) -> Result<Self> {
        Self::new(p[0], p[1], p[2])
    }

    /// Copy with parameter `index` (0 = s, 1 = r, 2 = b) replaced.
    pub fn with_component(self, index: usize, value: f64) -> Result<Self> {
        let mut p = self.to_array();
        p[index] = value;
        Self::from_array(p)
    }
}

pub const PARAM_NAMES: [&str; 3] = ["s", "r", "b"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LorenzState {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite state ({x}, {y}, {z})")));
        }
        Ok(Self { x, y, z })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub dt: f64,
    /// Recorded steps; zero yields the initial condition alone.
    pub n_steps: usize,
    pub transient_steps: usize,
}

impl IntegrationConfig {
    pub fn new(dt: f64, n_steps: usize, transient_steps: usize) -> Result<Self> {
        let c = Self { dt, n_steps, transient_steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    /// Default Lyapunov estimation run: 1000 time units after the transient.
    pub fn lyapunov_default() -> Self {
        Self::lyapunov(DEFAULT_DT)
    }

    /// The default Lyapunov run at step size `dt`.
    pub fn lyapunov(dt: f64) -> Self {
        Self {
            dt,
            n_steps: steps_for(LYAPUNOV_HORIZON_TIME, dt),
            transient_steps: steps_for(DEFAULT_TRANSIENT_TIME, dt),
        }
    }
}

/// Number of steps of size `dt` closest to `time`.
pub fn steps_for(time: f64, dt: f64) -> usize {
    (time / dt).round() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub states: Vec<LorenzState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn component(&self, c: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.to_array()[c]).collect()
    }

    pub fn arrays(&self) -> Vec<[f64; 3]> {
        self.states.iter().map(|s| s.to_array()).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,x,y,z")?;
        for (i, s) in self.states.iter().enumerate() {
            writeln!(w, "{},{},{},{}", self.time(i), s.x, s.y, s.z)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }

    /// Reads the `t,x,y,z` layout written by [`Trajectory::write_csv`].
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for record in reader.deserialize() {
            let (t, x, y, z): (f64, f64, f64, f64) = record?;
            times.push(t);
            states.push(LorenzState::new(x, y, z)?);
        }
        let t0 = times.first().copied().unwrap_or(0.0);
        let dt = match times.len() {
            0 | 1 => DEFAULT_DT,
            n => (times[n - 1] - t0) / (n - 1) as f64,
        };
        Ok(Self { dt, t0, states })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda_max: f64,
    /// `1 / lambda_max`; `None` when `lambda_max <= MIN_CHAOTIC_EXPONENT`.
    pub lyapunov_time: Option<f64>,
    pub n_renorm: usize,
}

impl LyapunovEstimate {
    pub fn is_chaotic(&self) -> bool {
        self.lyapunov_time.is_some()
    }
}

#[inline]
pub(crate) fn rhs(x: &[f64; 3], p: &[f64; 3]) -> [f64; 3] {
    let [s, r, b] = *p;
    [s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]]
}

#[inline]
fn jac(x: &[f64; 3], p: &[f64; 3]) -> [[f64; 3]; 3] {
    let [s, r, b] = *p;
    [[-s, s, 0.0], [r - x[2], -1.0, -x[0]], [x[1], x[0], -b]]
}

#[inline]
fn param_jac(x: &[f64; 3]) -> [[f64; 3]; 3] {
    [[x[1] - x[0], 0.0, 0.0], [0.0, x[0], 0.0], [0.0, 0.0, -x[2]]]
}

fn check_inputs(state: &LorenzState, params: &LorenzParams) -> Result<()> {
    if !state.is_finite() {
        return Err(Error::InvalidState(format!("non-finite state {state:?}")));
    }
    if !(params.s.is_finite() && params.r.is_finite() && params.b.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite parameters {params:?}")));
    }
    Ok(())
}

/// `(s(y - x), x(r - z) - y, xy - bz)`
pub fn lorenz_rhs(state: LorenzState, params: LorenzParams) -> Result<[f64; 3]> {
    check_inputs(&state, &params)?;
    Ok(rhs(&state.to_array(), &params.to_array()))
}

/// State Jacobian `∂f/∂x`, row-major.
pub fn lorenz_jacobian(state: LorenzState, params: LorenzParams) -> Result<[[f64; 3]; 3]> {
    check_inputs(&state, &params)?;
    Ok(jac(&state.to_array(), &params.to_array()))
}

/// Parameter Jacobian `∂f/∂(s, r, b)`, row-major.
pub fn lorenz_param_grad(state: LorenzState) -> Result<[[f64; 3]; 3]> {
    if !state.is_finite() {
        return Err(Error::InvalidState(format!("non-finite state {state:?}")));
    }
    Ok(param_jac(&state.to_array()))
}

/// One classical fourth-order Runge-Kutta step.
///
/// A non-finite stage yields [`Error::IntegrationBlowup`] with `step = 0`;
/// loop drivers replace it with their own step counter.
pub fn rk4_step<const N: usize, F>(rhs: F, state: &[f64; N], dt: f64) -> Result<[f64; N]>
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let blowup = |v: &[f64; N]| v.iter().any(|x| !x.is_finite());
    let shift = |k: &[f64; N], h: f64| -> [f64; N] { std::array::from_fn(|i| state[i] + h * k[i]) };
    let k1 = rhs(state);
    if blowup(&k1) {
        return Err(Error::IntegrationBlowup { step: 0 });
    }
    let k2 = rhs(&shift(&k1, 0.5 * dt));
    if blowup(&k2) {
        return Err(Error::IntegrationBlowup { step: 0 });
    }
    let k3 = rhs(&shift(&k2, 0.5 * dt));
    if blowup(&k3) {
        return Err(Error::IntegrationBlowup { step: 0 });
    }
    let k4 = rhs(&shift(&k3, dt));
    let next: [f64; N] = std::array::from_fn(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    if blowup(&k4) || blowup(&next) {
        return Err(Error::IntegrationBlowup { step: 0 });
    }
    Ok(next)
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::IntegrationBlowup { .. } => Error::IntegrationBlowup { step },
        other => other,
    }
}

/// Integrates `n` steps from `x`, calling `visit` on every new state.
fn march(
    p: &[f64; 3],
    mut x: [f64; 3],
    dt: f64,
    n: usize,
    first_step: usize,
    mut visit: impl FnMut([f64; 3]),
) -> Result<[f64; 3]> {
    for i in 0..n {
        x = rk4_step(|u| rhs(u, p), &x, dt).map_err(|e| at_step(e, first_step + i))?;
        visit(x);
    }
    Ok(x)
}

/// Runs the transient (discarded), then records `n_steps` further steps.
pub fn simulate(params: LorenzParams, ic: LorenzState, config: IntegrationConfig) -> Result<Trajectory> {
    config.validate()?;
    check_inputs(&ic, &params)?;
    let p = params.to_array();
    let start = march(&p, ic.to_array(), config.dt, config.transient_steps, 0, |_| {})?;
    let mut states = Vec::with_capacity(config.n_steps + 1);
    states.push(LorenzState::from_array(start)?);
    march(&p, start, config.dt, config.n_steps, config.transient_steps, |x| {
        states.push(LorenzState { x: x[0], y: x[1], z: x[2] })
    })?;
    Ok(Trajectory { dt: config.dt, t0: config.transient_steps as f64 * config.dt, states })
}

/// Seeded starting point away from the origin's stable manifold.
pub fn random_initial_state(seed: u64) -> LorenzState {
    let mut rng = crate::seed::rng(seed, "lorenz-ic", 0);
    LorenzState { x: rng.random_range(-10.0..10.0), y: rng.random_range(-10.0..10.0), z: rng.random_range(10.0..40.0) }
}

/// An attractor state together with the trajectory segment leading to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSample {
    /// `history_steps` states strictly before `state`, oldest first.
    pub history: Vec<[f64; 3]>,
    pub state: LorenzState,
}

/// States on the attractor separated by at least `spacing` time units.
pub fn sample_attractor(params: LorenzParams, n_samples: usize, spacing: f64, seed: u64) -> Result<Vec<LorenzState>> {
    Ok(sample_attractor_with_history(params, n_samples, spacing, 0, DEFAULT_DT, seed)?
        .into_iter()
        .map(|s| s.state)
        .collect())
}

/// Like [`sample_attractor`], also returning the preceding `history_steps`
/// states of each sample (used to wash a reservoir out onto that sample).
///
/// For histories no longer than the default transient the samples are the
/// same states whatever `history_steps` is.
pub fn sample_attractor_with_history(
    params: LorenzParams,
    n_samples: usize,
    spacing: f64,
    history_steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<AttractorSample>> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if !(spacing > 0.0) {
        return Err(Error::Config(format!("spacing must be positive, got {spacing}")));
    }
    params.validate()?;
    let stride = ((spacing / dt).ceil() as usize).max(1);
    let total = history_steps + (n_samples - 1) * stride;
    // the history is carved out of the transient so sample positions do not
    // depend on its length
    let transient = steps_for(DEFAULT_TRANSIENT_TIME, dt).saturating_sub(history_steps);
    let config = IntegrationConfig::new(dt, total, transient)?;
    let traj = simulate(params, random_initial_state(seed), config)?.arrays();
    Ok((0..n_samples)
        .map(|k| {
            let at = history_steps + k * stride;
            AttractorSample {
                history: traj[at - history_steps..at].to_vec(),
                state: LorenzState { x: traj[at][0], y: traj[at][1], z: traj[at][2] },
            }
        })
        .collect())
}

/// Leading Lyapunov exponent by tangent propagation with renormalization
/// every [`LYAPUNOV_RENORM_TIME`].
///
/// An exponent at or below [`MIN_CHAOTIC_EXPONENT`] is reported (not an error)
/// with `lyapunov_time = None`.
pub fn lyapunov_time(params: LorenzParams, config: IntegrationConfig, seed: u64) -> Result<LyapunovEstimate> {
    config.validate()?;
    params.validate()?;
    let p = params.to_array();
    let x0 = random_initial_state(seed).to_array();
    let x = march(&p, x0, config.dt, config.transient_steps, 0, |_| {})?;

    let mut rng = crate::seed::rng(seed, "lyapunov-tangent", 0);
    let mut v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);

    let coupled = |u: &[f64; 6]| -> [f64; 6] {
        let xs = [u[0], u[1], u[2]];
        let f = rhs(&xs, &p);
        let j = jac(&xs, &p);
        let mut out = [f[0], f[1], f[2], 0.0, 0.0, 0.0];
        for i in 0..3 {
            out[3 + i] = j[i][0] * u[3] + j[i][1] * u[4] + j[i][2] * u[5];
        }
        out
    };

    let every = steps_for(LYAPUNOV_RENORM_TIME, config.dt).max(1);
    let mut u = [x[0], x[1], x[2], v[0], v[1], v[2]];
    let mut log_sum = 0.0;
    let mut n_renorm = 0;
    let mut since = 0;
    for i in 0..config.n_steps {
        u = rk4_step(coupled, &u, config.dt).map_err(|e| at_step(e, config.transient_steps + i))?;
        since += 1;
        if since == every || i + 1 == config.n_steps {
            let norm = (u[3] * u[3] + u[4] * u[4] + u[5] * u[5]).sqrt();
            log_sum += norm.ln();
            u[3] /= norm;
            u[4] /= norm;
            u[5] /= norm;
            n_renorm += 1;
            since = 0;
        }
    }
    if n_renorm == 0 {
        return Err(Error::Config("Lyapunov estimation needs at least one step".into()));
    }
    let lambda_max = log_sum / (config.n_steps as f64 * config.dt);
    let lyapunov_time = (lambda_max > MIN_CHAOTIC_EXPONENT).then(|| 1.0 / lambda_max);
    Ok(LyapunovEstimate { lambda_max, lyapunov_time, n_renorm })
}

/// Step count and step size covering `window` with steps no longer than `dt`
/// (rounded to the nearest count, at least one).
fn window_steps(window: f64, dt: f64) -> (usize, f64) {
    let n = ((window / dt).round() as usize).max(1);
    (n, window / n as f64)
}

fn forward_window(params: &[f64; 3], ic: [f64; 3], window: f64, dt: f64) -> Result<(Vec<[f64; 3]>, f64)> {
    let (n, h) = window_steps(window, dt);
    let mut states = Vec::with_capacity(n + 1);
    states.push(ic);
    march(params, ic, h, n, 0, |x| states.push(x))?;
    Ok((states, h))
}

/// Trapezoidal time average of the objective over `[0, window]`.
pub fn window_average(
    params: LorenzParams,
    ic: LorenzState,
    window: f64,
    dt: f64,
    objective: ObjectiveSpec,
) -> Result<f64> {
    check_inputs(&ic, &params)?;
    if !(window > 0.0) {
        return Err(Error::Config(format!("window must be positive, got {window}")));
    }
    let (states, _) = forward_window(&params.to_array(), ic.to_array(), window, dt)?;
    Ok(trapezoid_mean(&states, objective.component))
}

fn trapezoid_mean(states: &[[f64; 3]], c: usize) -> f64 {
    let n = states.len() - 1;
    let inner: f64 = states[1..n].iter().map(|s| s[c]).sum();
    (0.5 * (states[0][c] + states[n][c]) + inner) / n as f64
}

/// Gradient of the window average of the objective with respect to
/// `(s, r, b)`, from the continuous adjoint of the true system.
///
/// The adjoint `q̇ = -Jᵀq - (1/T) e_c` is integrated backward from `q(T) = 0`
/// with RK4 along the stored forward trajectory, together with
/// `dJ/dp = ∫ qᵀ ∂f/∂p dt`. Mid-step forward states come from cubic Hermite
/// interpolation with the exact vector field at the stored nodes.
pub fn true_window_sensitivity(
    params: LorenzParams,
    ic: LorenzState,
    window: f64,
    dt: f64,
    objective: ObjectiveSpec,
) -> Result<SensitivityVector> {
    check_inputs(&ic, &params)?;
    if !(window > 0.0) {
        return Err(Error::Config(format!("window must be positive, got {window}")));
    }
    if objective.component >= 3 {
        return Err(Error::Config(format!("objective component {} out of range", objective.component)));
    }
    let p = params.to_array();
    let (states, h) = forward_window(&p, ic.to_array(), window, dt).map_err(|e| match e {
        Error::IntegrationBlowup { step } => Error::DivergedAdjoint { step, time: step as f64 * h_of(window, dt) },
        other => other,
    })?;
    let n = states.len() - 1;
    let inv_t = 1.0 / window;
    let c = objective.component;

    // (q, G) evolve in reversed time τ = T - t.
    let field = |x: &[f64; 3], u: &[f64; 6]| -> [f64; 6] {
        let j = jac(x, &p);
        let g = param_jac(x);
        let q = [u[0], u[1], u[2]];
        let mut out = [0.0; 6];
        for i in 0..3 {
            out[i] = j[0][i] * q[0] + j[1][i] * q[1] + j[2][i] * q[2];
            out[3 + i] = g[0][i] * q[0] + g[1][i] * q[1] + g[2][i] * q[2];
        }
        out[c] += inv_t;
        out
    };

    let mut u = [0.0; 6];
    for k in (0..n).rev() {
        let (xa, xb) = (states[k + 1], states[k]);
        let (fa, fb) = (rhs(&xa, &p), rhs(&xb, &p));
        let xm: [f64; 3] = std::array::from_fn(|i| 0.5 * (xa[i] + xb[i]) + h / 8.0 * (fb[i] - fa[i]));
        let k1 = field(&xa, &u);
        let k2 = field(&xm, &std::array::from_fn(|i| u[i] + 0.5 * h * k1[i]));
        let k3 = field(&xm, &std::array::from_fn(|i| u[i] + 0.5 * h * k2[i]));
        let k4 = field(&xb, &std::array::from_fn(|i| u[i] + h * k3[i]));
        for i in 0..6 {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedAdjoint { step: k, time: k as f64 * h });
        }
    }
    Ok(SensitivityVector { djdp: vec![u[3], u[4], u[5]], window_steps: n, method: Method::Adjoint })
}

fn h_of(window: f64, dt: f64) -> f64 {
    window_steps(window, dt).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(x: f64, y: f64, z: f64) -> LorenzState {
        LorenzState::new(x, y, z).unwrap()
    }

    #[test]
    fn rhs_direct_substitution() {
        let p = LorenzParams::reference();
        assert_eq!(lorenz_rhs(state(0.0, 0.0, 0.0), p).unwrap(), [0.0, 0.0, 0.0]);
        let f = lorenz_rhs(state(1.0, 1.0, 1.0), p).unwrap();
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert!((f[2] - (1.0 - 8.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let bad = LorenzState { x: f64::NAN, y: 0.0, z: 0.0 };
        assert!(matches!(lorenz_rhs(bad, LorenzParams::reference()), Err(Error::InvalidState(_))));
        assert!(lorenz_jacobian(bad, LorenzParams::reference()).is_err());
        assert!(lorenz_param_grad(bad).is_err());
        assert!(LorenzState::new(f64::INFINITY, 0.0, 0.0).is_err());
        assert!(LorenzParams::new(-1.0, 28.0, 1.0).is_err());
    }

    #[test]
    fn jacobian_at_origin() {
        let j = lorenz_jacobian(state(0.0, 0.0, 0.0), LorenzParams::reference()).unwrap();
        assert_eq!(j[0], [-10.0, 10.0, 0.0]);
        assert_eq!(j[1], [28.0, -1.0, 0.0]);
        assert_eq!(j[2], [0.0, 0.0, -8.0 / 3.0]);
    }

    #[test]
    fn param_grad_direct_substitution() {
        assert_eq!(lorenz_param_grad(state(0.0, 0.0, 0.0)).unwrap(), [[0.0; 3]; 3]);
        let g = lorenz_param_grad(state(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(g, [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
    }

    #[test]
    fn rk4_zero_field_and_exponential() {
        let x = rk4_step(|_: &[f64; 2]| [0.0, 0.0], &[1.5, -2.0], 0.1).unwrap();
        assert_eq!(x, [1.5, -2.0]);
        let e = rk4_step(|u: &[f64; 1]| [u[0]], &[1.0], 0.1).unwrap();
        assert!((e[0] - 0.1f64.exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_reports_blowup() {
        let r = rk4_step(|u: &[f64; 1]| [1.0 / (u[0] - 1.0)], &[1.0], 0.1);
        assert!(matches!(r, Err(Error::IntegrationBlowup { .. })));
        let p = LorenzParams::new(10.0, 1e300, 1.0).unwrap();
        let r = simulate(p, state(1e300, 1e300, 1e300), IntegrationConfig::new(0.01, 10, 0).unwrap());
        assert!(matches!(r, Err(Error::IntegrationBlowup { step: 0 })));
    }

    #[test]
    fn zero_steps_returns_initial_condition() {
        let ic = state(1.0, 2.0, 3.0);
        let t = simulate(LorenzParams::reference(), ic, IntegrationConfig::new(0.01, 0, 0).unwrap()).unwrap();
        assert_eq!(t.states, vec![ic]);
    }

    #[test]
    fn transient_is_discarded() {
        let ic = state(1.0, 2.0, 3.0);
        let p = LorenzParams::reference();
        let full = simulate(p, ic, IntegrationConfig::new(0.01, 150, 0).unwrap()).unwrap();
        let cut = simulate(p, ic, IntegrationConfig::new(0.01, 50, 100).unwrap()).unwrap();
        assert_eq!(cut.states[..], full.states[100..]);
        assert!((cut.t0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subcritical_regime_decays_to_origin() {
        let p = LorenzParams::new(10.0, 0.5, 8.0 / 3.0).unwrap();
        let t = simulate(p, state(5.0, -3.0, 8.0), IntegrationConfig::new(0.01, 5000, 0).unwrap()).unwrap();
        let last = t.states.last().unwrap().to_array();
        assert!(last.iter().all(|v| v.abs() < 1e-6), "{last:?}");
    }

    #[test]
    fn rhs_matches_centered_difference_of_positions() {
        let p = LorenzParams::reference();
        let dt = 1e-3;
        let t = simulate(p, state(1.0, 1.0, 1.0), IntegrationConfig::new(dt, 200, 2000).unwrap()).unwrap();
        for i in [50, 100, 150] {
            let (a, b) = (t.states[i - 1].to_array(), t.states[i + 1].to_array());
            let f = lorenz_rhs(t.states[i], p).unwrap();
            for c in 0..3 {
                let fd = (b[c] - a[c]) / (2.0 * dt);
                // O(dt^2) truncation: x''' dt^2 / 6 with |x'''| below ~1e4 on the attractor
                assert!((fd - f[c]).abs() < 1e-2, "c={c}: {fd} vs {}", f[c]);
            }
        }
    }

    #[test]
    fn sample_attractor_contract() {
        let p = LorenzParams::reference();
        let one = sample_attractor(p, 1, 1.1, 5).unwrap();
        assert_eq!(one.len(), 1);
        let a = sample_attractor(p, 10, 1.1, 5).unwrap();
        assert_eq!(a, sample_attractor(p, 10, 1.1, 5).unwrap());
        assert_ne!(a, sample_attractor(p, 10, 1.1, 6).unwrap());
        assert!(sample_attractor(p, 0, 1.0, 5).is_err());
        assert!(sample_attractor(p, 3, 0.0, 5).is_err());
    }

    #[test]
    fn history_ends_right_before_sample() {
        let p = LorenzParams::reference();
        let s = sample_attractor_with_history(p, 3, 0.5, 40, DEFAULT_DT, 9).unwrap();
        for sample in &s {
            assert_eq!(sample.history.len(), 40);
            let last = *sample.history.last().unwrap();
            let next = rk4_step(|u| rhs(u, &p.to_array()), &last, DEFAULT_DT).unwrap();
            assert_eq!(next, sample.state.to_array());
        }
        let plain = sample_attractor(p, 3, 0.5, 9).unwrap();
        let states: Vec<LorenzState> = s.iter().map(|x| x.state).collect();
        assert_eq!(plain, states);
    }

    #[test]
    fn subcritical_exponent_is_negative() {
        let p = LorenzParams::new(10.0, 0.5, 8.0 / 3.0).unwrap();
        let config = IntegrationConfig::new(0.01, 20_000, 0).unwrap();
        let est = lyapunov_time(p, config, 1).unwrap();
        assert!(est.lambda_max < 0.0);
        assert!(!est.is_chaotic());
        assert_eq!(est.lyapunov_time, None);
    }

    #[test]
    fn vanishing_window_gives_vanishing_gradient() {
        let ic = sample_attractor(LorenzParams::reference(), 1, 1.0, 2).unwrap()[0];
        let g =
            true_window_sensitivity(LorenzParams::reference(), ic, 1e-6, DEFAULT_DT, ObjectiveSpec::default()).unwrap();
        assert!(g.djdp.iter().all(|v| v.abs() < 1e-4), "{:?}", g.djdp);
        assert!(
            true_window_sensitivity(LorenzParams::reference(), ic, 0.0, DEFAULT_DT, ObjectiveSpec::default()).is_err()
        );
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let t = simulate(LorenzParams::reference(), state(1.0, 1.0, 1.0), IntegrationConfig::new(0.01, 5, 0).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        t.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x,y,z\n"));
        let back = Trajectory::load_csv(&path).unwrap();
        assert_eq!(back.states, t.states);
    }
}
