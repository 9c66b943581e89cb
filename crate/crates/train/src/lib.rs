//! Staged training for the driving world model, plus evaluation metrics,
//! an embedding-space distribution distance, and the ablation harness.

pub mod ablate;
pub mod batch;
pub mod config;
pub mod eval;
pub mod fid;
pub mod report;
pub mod trainer;
