//! Multi-vocabulary bag-of-words image search with joint PCA + whitening
//! short vectors.
//!
//! Stages, in pipeline order: [`descriptors`] (per-image local features and
//! transforms), [`vocabulary`] (k-means and quantization), [`bow`] (BOW
//! encoding and multi-vocabulary concatenation), [`reduction`] (joint
//! dimensionality reduction), [`search`] (ranking and mAP), and [`cli`].

mod binio;
pub mod bow;
pub mod cli;
pub mod config;
pub mod descriptors;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod reduction;
pub mod search;
pub mod synth;
pub mod vocabulary;

pub use bow::{BowMatrix, BowVector, VocabularyBundle};
pub use config::{PipelineConfig, VocabEntry};
pub use descriptors::{ChannelManifest, DescriptorMatrix, DescriptorProjection};
pub use error::{Error, Result};
pub use reduction::{ReductionModel, ReductionOptions, ShortVector};
pub use search::{GroundTruth, Index, QueryTruth};
pub use synth::{SynthData, SynthSpec};
pub use vocabulary::{Assignment, KMeansParams, Vocabulary};
