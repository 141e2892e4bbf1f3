//! Dataset generation, optimization, checkpoints and evaluation.

pub mod config;
pub mod dataset;
pub mod optim;
pub mod objective;
pub mod checkpoint;
pub mod eval;
pub mod train;
