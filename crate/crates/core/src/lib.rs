//! Plane-orientation metadata toolkit: NIfTI ingestion, slice cleaning,
//! 2.5D context assembly, a small CPU convolutional network engine with
//! portable export, uncertainty-gated metadata fusion, and Grad-CAM
//! explanations.

pub mod context;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod preprocess;

pub use error::{Error, Result};
