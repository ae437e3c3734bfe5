//! Cross-domain industrial anomaly detection at desk scale.
//!
//! The crate is organised as a pipeline:
//!
//! * [`numkernel`]: tensors, forward ops, analytic gradients, Adam
//! * [`datagen`]: procedural texture classes with injected defects
//! * [`backbone`]: frozen hierarchical and dense feature extractors
//! * [`fusion`]: per-scale adapters, dense projections, channel interleave
//! * [`decoder`]: per-class segmentation heads and pseudo-label heads
//! * [`trainer`]: losses, augmentation, the two-phase training loop
//! * [`inference`]: memory bank, Sinkhorn K-means, anomaly maps, timing
//! * [`metrics`]: pixel AUC, AP and mean-IoU PRO
//! * [`cli`]: the command surface and run configuration

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod decoder;
mod error;
pub mod fusion;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use numkernel::Tensor;
