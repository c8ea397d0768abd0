//! Continual-learning harness: synthetic fact data, pretraining, the stream
//! driver, checkpoints, and metrics output.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod stream;
