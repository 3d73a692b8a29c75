//! Reproducible low-dose CT robustness benchmark.
//!
//! Dose simulation, motion and ring artifacts with a graded severity
//! schedule, image-quality and classification metrics with confidence
//! intervals, a classical denoise-then-classify baseline, and the harness
//! that ties them together into reproducible reports.

pub mod artifact;
pub mod baseline;
pub mod dataset;
pub mod dose;
pub mod error;
pub mod harness;
pub mod image;
pub mod iq;
pub mod metrics;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use seed::SeedSpec;
