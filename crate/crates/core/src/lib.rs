//! Image-to-indicator hierarchical report generation.
//!
//! The pipeline runs in three stages: a [`classifier`] turns images into
//! per-indicator state distributions, [`expansion`] renders every
//! (indicator, state) pair as a short phrase and encodes it back into a
//! vector, and the [`generator`] decodes a report conditioned on those
//! vectors and the visual features. Everything is trained jointly on the
//! [`tensor`] autodiff core.

pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod expansion;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
