//! Noisy Student self-training for binary segmentation.
//!
//! The crate covers the whole loop: synthetic phantom data ([`phantom`]),
//! student noising ([`augment`]), a from-scratch fully-convolutional model
//! ([`model`]), teacher pseudo-labeling with a percentile ranker
//! ([`pseudolabel`]), pixel/frame/stack metrics ([`metrics`]), and the
//! iteration driver with its ablations ([`pipeline`]).

pub mod augment;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod pseudolabel;
pub mod rng;

pub use error::{Error, Result};
pub use frame::{Frame, Mask, ProbMap, IGNORE, NEG, POS};
