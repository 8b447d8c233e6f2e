//! Modality contribution analysis for multimodal models.
//!
//! Occlude one modality (or one patch of it) at a time, measure how far the
//! model output moves, and normalize the movement into shares.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod kahan;
pub mod masking;
pub mod metric;
pub mod model;
pub mod report;
pub mod selftest;
pub mod tensor;

pub use error::{Error, ModelError, Result};
