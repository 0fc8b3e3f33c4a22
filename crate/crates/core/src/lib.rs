//! Rank-based metric-learning losses with hand-derived gradients.
//!
//! The crate provides the PNP loss family (penalizing negatives ranked before
//! positives) and a Smooth-AP baseline over sigmoid-relaxed ranks, gradients
//! chained through cosine similarity and unit normalization, a finite
//! difference checker, and a small 2D toy harness (MLP, Adam, data, metrics)
//! for studying how each loss spreads gradient over hard positives.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod smooth_rank;

pub use error::{Error, Result};
pub use losses::{batch_loss, hard_batch_loss, LossResult, LossSpec, LossVariant};
pub use numerics::{EmbeddingBatch, Matrix};
