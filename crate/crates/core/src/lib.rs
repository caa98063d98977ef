//! Unsupervised prompt learning with an auxiliary, diffusion-generated image
//! classifier, over a deterministic simulated embedding world.

pub mod backend;
pub mod error;
pub mod evalbench;
pub mod experiment;
pub mod math;
pub mod pseudolabel;
pub mod rng;
pub mod selftest;
pub mod report;
pub mod synthgen;
pub mod trainer;

pub use error::{AirError, Result};
