use thiserror::Error;

use crate::ensemble::SensitivityEstimate;
use crate::hyperopt::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A Runge-Kutta stage produced a non-finite value.
    #[error("integration blew up at step {step}")]
    IntegrationBlowup { step: usize },

    #[error("adjoint diverged at step {step} (t = {time})")]
    DivergedAdjoint { step: usize, time: f64 },

    #[error("tangent diverged at step {step}")]
    DivergedTangent { step: usize },

    #[error("power iteration did not converge after {iterations} iterations")]
    SpectralRadius { iterations: usize },

    #[error("reservoir state became non-finite at step {step}")]
    StateBlowup { step: usize },

    #[error("readout is not trained")]
    NotTrained,

    #[error("normal matrix is singular with zero regularization; use a Tikhonov factor > 0")]
    IllConditioned,

    #[error("inconsistent trajectory at step {step}, unit {unit}: |r~| = {value} is not a tanh output")]
    InconsistentTrajectory { step: usize, unit: usize, value: f64 },

    #[error("closed-loop attractor diverged at step {step}")]
    DivergedAttractor { step: usize },

    #[error("statistics requested over an empty window")]
    EmptyStatistics,

    #[error("search failed: all {} candidates infeasible", history.len())]
    SearchFailed { history: Vec<ValidationReport> },

    #[error("unreliable estimate: {} of {} members diverged", partial.n_diverged, partial.n_members())]
    UnreliableEstimate { partial: Box<SensitivityEstimate> },

    #[error("polynomial fit of degree {degree} needs {} points, got {points}", degree + 1)]
    UnderdeterminedFit { degree: usize, points: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
