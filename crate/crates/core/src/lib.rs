//! Skeleton-guided registration of cross-source point clouds.
//!
//! Each cloud is reduced to a feature pyramid whose coarsest points
//! (superpoints) are summarised by a learned skeleton of sphere centres.
//! A transformer with structure embeddings encodes both, coarse matches are
//! drawn from superpoints and skeleton points, spectral denoising cleans the
//! skeletal matches, and dense patch matching with local-to-global
//! registration produces the final transform.

// Numeric kernels index several buffers in lockstep, `Var` arithmetic is
// fallible and so cannot use the operator traits, and negated float
// comparisons deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cloud;
pub mod config;
pub mod encoder;
pub mod error;
mod fmt;
pub mod harness;
mod layers;
pub mod matching;
pub mod pipeline;
pub mod skeleton;
pub mod tensor;

pub use cloud::{PointCloud, RigidTransform};
pub use config::Config;
pub use error::{Error, Result};
pub use pipeline::{register, RegistrationResult, TrainSample};
pub use tensor::ParameterStore;
