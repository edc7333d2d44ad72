//! Masked image modeling for MRI k-space reconstruction.

pub mod data;
pub mod encoders;
pub mod error;
pub mod head;
pub mod image;
pub mod kspace;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
