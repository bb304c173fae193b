//! Four-stream multimodal information-disorder classifier.
//!
//! A posting is modeled through four modalities: its primary text, the
//! concatenated comments, the attached image, and a small metadata vector.
//! Each modality is encoded into a fixed-length embedding; the three content
//! embeddings are fused (concat / max / avg / sum), compressed to six
//! dimensions, concatenated with the six-dimensional metadata embedding, and
//! classified by a two-neuron softmax head.
//!
//! The crate covers the full experiment pipeline at desk scale: TSV
//! ingestion, train-split-only normalization, per-stream pretraining,
//! frozen-stream fusion training, a modality-subset ablation grid, and a
//! planted-signal synthetic generator with known Bayes accuracies.

pub mod checkpoint;
pub mod data_model;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ingest;
pub mod nn;
pub mod preprocess;
pub mod synthgen;
pub mod training;

pub use data_model::{
    Label, MetadataFeature, MetadataSchema, ModalityMask, PostingRecord, Prediction, Split,
};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionStrategy, ModelSpec};
pub use preprocess::{ImageStats, MetadataStats, NormalizerStats, TextStats};
pub use training::{AdamConfig, TrainConfig, TrainRegime};
