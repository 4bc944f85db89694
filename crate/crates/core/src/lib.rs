//! Probabilistic lesion counting from voxel segmentation maps.
//!
//! A probability map is clustered into candidate regions, each region gets
//! an existence probability (its maximum voxel), and the region
//! probabilities are combined into the exact Poisson-binomial distribution
//! of the lesion count. The count loss is differentiable with respect to the
//! voxel probabilities, and the evaluation tools compare the resulting
//! distributions with the connected-component baseline.

pub mod aggregate;
pub mod cli;
pub mod countgrad;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod par;
pub mod pbdist;
pub mod plot;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
