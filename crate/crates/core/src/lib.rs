//! Distributed speculative decoding with gradient-based fair-goodput scheduling.
//!
//! The crate is organised bottom-up:
//!
//! * [`token_model`]: exact draft/verify semantics over small Markov token models.
//! * [`estimator`]: exponential smoothing of acceptance rates and goodput.
//! * [`scheduler`]: the gradient scheduler (greedy over marginal gains), baselines
//!   and a brute-force optimality oracle.
//! * [`fluid_oracle`]: the proportional-fair optimum over the goodput region,
//!   computed with Frank-Wolfe, plus an independent simplex-ascent oracle.
//! * [`sim_engine`]: the round-based simulator and trace statistics.
//! * [`experiments`]: configuration, presets, trace output and the run/oracle/
//!   compare/sweep drivers used by the CLI.

pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fluid_oracle;
pub mod rng;
pub mod scheduler;
pub mod sim_engine;
pub mod token_model;

pub use error::{Error, Result};
