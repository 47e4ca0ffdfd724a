//! Geometry, ground truth and evaluation for query-anytime 4D reconstruction.

pub mod archive;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod knn;
pub mod representation;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
