//! Dataset generation, losses, metrics, training and evaluation.

pub mod dataset;
pub mod evaluate;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod train;
