//! Joint estimation of annotator confusion matrices and a classifier from
//! noisy crowd labels, with simulated annotator populations, EM-style
//! baselines, and a reproducible experiment harness.

pub mod annotator_sim;
pub mod cli_runner;
pub mod datasets;
pub mod em_baselines;
pub mod error;
pub mod metrics;
pub mod noisy_model;
pub mod trainer;
pub mod numkit;

pub use error::{Error, Result};
