//! Data-side machinery for multilingual masked-prediction self-supervised
//! speech pre-training.
//!
//! The crate covers the whole path from a corpus manifest to a trained
//! desk-scale model:
//!
//! * [`corpus`]: manifests, duration filtering, language statistics and the
//!   balanced second-stage subset.
//! * [`augment`]: dynamic mixing with in-batch utterances or noise recordings.
//! * [`labels`]: cepstral features, k-means codebooks, frame pseudo-labels and
//!   multi-resolution handling.
//! * [`masking`]: span masks for masked prediction.
//! * [`batching`]: duration-capped packing, the noise cache and multi-stage
//!   plan execution.
//! * [`toymodel`]: a small masked-prediction network trained on frame features.
//! * [`scoring`]: CER and SUPERB-style score aggregation.
//! * [`pipeline`]: end-to-end orchestration used by the command line tool.

pub mod audio;
pub mod augment;
pub mod batching;
pub mod corpus;
mod error;
pub mod labels;
pub mod masking;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod toymodel;

pub use error::{Error, Result};

pub use augment::{AugmentConfig, MixPlan, SourceKind};
pub use batching::{Batch, BatchSkeleton, NoiseCache, TrainingPlan};
pub use corpus::{CorpusTag, LanguageStats, Manifest, UtteranceRecord};
pub use labels::{Codebook, FrameFeatureSequence, FrameLabelSequence, FrameShift};
pub use masking::MaskSpec;
pub use scoring::{Metric, ScoreTable, TaskResult};
pub use toymodel::{ToyModelConfig, ToyModelState};
