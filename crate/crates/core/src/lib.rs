//! Synthetic body/background action-recognition study: clip synthesis,
//! stimulus versioning, two-stream classifiers, training and evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nets;
pub mod raster;
pub mod report;
pub mod stats;
pub mod stimpipe;
pub mod study;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
