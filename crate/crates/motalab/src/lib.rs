//! Continual-learning laboratory: multi-mode training with checkpoint
//! backtracking, classic baselines, forgetting/transfer metrics, synthetic
//! task streams, and loss-landscape exports.

pub mod baselines;
pub mod config;
pub mod error;
pub mod exec;
pub mod landscape;
pub mod metrics;
pub mod mota;
pub mod nn;
pub mod runner;
pub mod seeding;
pub mod stream;

pub use error::{Error, Result};
