//! Entire-space pre-ranking laboratory: a cascade simulator, query-level
//! sample construction with all-scenario labels, a two-tower model with
//! list-wise losses and distillation, and set-quality metrics.

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod samples;
pub mod sim;
pub mod teacher;
pub mod tensor;
pub mod two_tower;

pub use error::{Error, Result};
