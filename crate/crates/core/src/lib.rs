//! Residual noise-contrastive estimation (R-NCE) laboratory.
//!
//! The crate bundles a small reverse-mode differentiation engine, the
//! contrastive losses built on it, desk-scale patch encoders with an
//! attention aggregator, a synthetic cohort generator, the two-stage
//! training procedure, and the statistics used to compare representations
//! (linear probes, bootstrap, permutation tests, FDR, brain-age gaps).

pub mod brainage;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod evalstats;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod parallel;
pub mod synthgen;
pub mod trainer;

pub use error::{LabError, Result};
pub use matrix::DenseMatrix;
