//! Semantic keypoint matching with features from a prompt-conditioned
//! denoising UNet, plus the prompt-tuning loop that learns the conditioning.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the precision for callers that don't care.

pub mod autodiff;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod matching;
pub mod prompting;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use datasets::{BBox, DatasetSplit, MatchPair, SourceKind, SplitName};
pub use diffusion::{Backbone, BackboneConfig, NoiseSchedule, TableBackbone, ToyUnet, ToyUnetConfig};
pub use error::{Error, Result};
pub use evaluation::{Aggregation, PckReport, ThresholdKind};
pub use matching::{CorrelationMap, FeatureMap, Grid, ImageSize, Keypoint, ProbabilityMap};
pub use prompting::{ClassPromptBank, CpmModule, PromptEmbedding, PromptProvider};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{Checkpoint, ProviderKind, TrainConfig, Trainer};

pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type ProbabilityMapF32 = ProbabilityMap<f32>;
pub type ProbabilityMapF64 = ProbabilityMap<f64>;
pub type PromptProviderF32 = PromptProvider<f32>;
pub type PromptProviderF64 = PromptProvider<f64>;
pub type ToyUnetF32 = ToyUnet<f32>;
pub type ToyUnetF64 = ToyUnet<f64>;
pub type CheckpointF32 = Checkpoint<f32>;
pub type CheckpointF64 = Checkpoint<f64>;
