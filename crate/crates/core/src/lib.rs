//! Privacy audit of recommender exposure: encoder–decoder attacks that
//! recover a user's recent clicks from the slate shown to them, metrics for
//! judging those attacks, and exposure perturbation as a defence.

pub mod datamodel;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod ingestion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod protection;
pub mod seeds;
pub mod training;

pub use datamodel::{AttackConfig, AttackExample, BehaviorSequence, DatasetSplit, ExposureSlate, Vocabulary};
pub use decoders::{Activation, DecoderKind};
pub use encoders::{EncoderKind, EmbeddingTable};
pub use error::{Error, Result};
pub use metrics::{MetricsReport, RankedInference};
pub use model::{AttackModel, ModelSpec};
