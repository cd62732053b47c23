//! The context-similarity head.
//!
//! A per-class 1x1 projection maps frozen encoder features to similarity
//! features; neighbor similarities `exp(-|a_i - a_j|_1)` within a fixed radius
//! are trained against reliable pseudo-label agreement.

mod adam;
mod loss;
mod neighborhood;
mod pairs;
mod params;
mod similarity;
mod train;

pub use adam::{adam_step, AdamState};
pub use loss::{loss_gradient, similarity_loss, LossTerms, LOG_FLOOR};
pub use neighborhood::{NeighborhoodConfig, NeighborhoodSpec, Offset};
pub use pairs::{pair_labels, Pair, PairSet};
pub use params::{project_features, ClassProjection, HeadMeta, SimHeadParams};
pub use similarity::{similarity_field, SimilarityField};
pub use train::{train_head, HeadConfig, HeadSample, TrainLog};
