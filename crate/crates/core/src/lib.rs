//! Parameter-aware echo state networks (ESNs) and their discrete adjoint.
//!
//! The crate learns the parametrized dynamics of a chaotic system with a
//! reservoir computer whose input is augmented by the (shifted, scaled)
//! physical parameters, then differentiates the autonomous network to obtain
//! sensitivities of time-averaged objectives to every parameter in a single
//! backward sweep. The Lorenz 63 system supplies training data and the
//! ground-truth tangent/adjoint sensitivities the network is checked against.
//!
//! Module map:
//!
//! - [`dynsys`]: Lorenz 63 simulation, Jacobians, Lyapunov times and the
//!   continuous adjoint of the true system.
//! - [`esn`]: reservoir construction, ridge training, open/closed loop,
//!   forecast horizon and long-term statistics.
//! - [`adjoint`]: step Jacobians of the closed-loop network, adjoint and
//!   tangent sweeps, finite-difference sensitivities.
//! - [`hyperopt`]: seeded random search over network hyperparameters scored
//!   on held-out regimes.
//! - [`ensemble`]: ensemble-adjoint climate sensitivities, parameter sweeps
//!   and polynomial-fit direct estimates.
//! - [`pipeline`]: config-driven experiment commands behind the CLI.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod dynsys;
pub mod ensemble;
pub mod error;
pub mod esn;
pub mod hyperopt;
pub mod linalg;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
