//! Weak-to-strong generalization laboratory: synthetic patch data, a linear
//! weak CNN and a two-layer ReLU strong CNN, pseudo-label training, exact
//! signal-noise decomposition tracking, and experiment orchestration.

pub mod config;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod models;
pub mod packed;
pub mod plot;
pub mod rng;
pub mod run_dir;
pub mod training;

pub use error::{Error, Result};
