//! Context-aware pseudo-label refinement for source-free adaptation of
//! two-class (cup, disc) fundus segmentation.
//!
//! Tensors are channels-last: a map over an `H x W` grid with `C` channels is
//! stored row-major as `[H, W, C]`.

pub mod adapt;
pub mod config;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod npy;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod simhead;
pub mod stages;
pub mod synthgen;
pub mod tensor;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use labeling::{FeatureMap, LabelConfig, LabelMask, ProbMap, ProbStack, PrototypeSet, ReliabilityMask, UncertaintyMap};
pub use refine::RefineConfig;
pub use rng::Rng;
pub use tensor::{Grid, Tensor};
