//! Solver and simulator toolkit for single-server edge admission control.
//!
//! The server holds a bounded request queue `x ∈ 0..=X` and a discretized CPU
//! load `ℓ ∈ 0..=L`. On every request arrival a controller either accepts the
//! request into the queue or offloads it to a peer. The continuous-time chain is
//! uniformized into a discrete-time MDP with discount `β`, which this crate
//! solves exactly ([`dp`]), learns with a two-timescale threshold actor-critic
//! ([`salmut`]) or tabular Q-learning ([`learners`]), drives with time-varying
//! traffic ([`scenario`]) and evaluates ([`eval`]).

pub mod artifacts;
pub mod config;
pub mod dp;
pub mod error;
pub mod eval;
pub mod grid;
pub mod learners;
pub mod model;
pub mod rng;
pub mod salmut;
pub mod scenario;
pub mod training;

pub use error::{Error, Result};
pub use grid::Grid;
pub use model::{Action, CostModel, Event, ModelParams, ResourceDist, State};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
