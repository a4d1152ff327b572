//! Budgeted exploration planning over a grid → square → patch → hole atlas.

pub mod atlas;
pub mod baselines;
pub mod classifier;
pub mod dataset;
pub mod dqn;
pub mod elim;
pub mod episode;
pub mod eval;
pub mod error;
pub mod features;
pub mod qnet;
pub mod rng;

pub use error::{Error, Result};
