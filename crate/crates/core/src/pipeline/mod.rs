//! The experimental protocol: pretraining streams and loops, per-subject
//! finetuning with time-block splits, the cross-evaluation grid and the
//! embedding-clustering analysis.
//!
//! Seeds: every random stream is `seed::derived_rng(master, tags)` where the
//! tags name the stage and its coordinates (model, subject, length, seed), so
//! any run can be reproduced in isolation.

mod config;
mod data;
mod embed;
mod finetune;
mod pretrain;
mod results;

use thiserror::Error;

pub use config::{AnalysisConfig, ExperimentConfig, FinetuneConfig, ModelSpec, PretrainConfig};
pub use data::{
    block_assignment, is_pretrain_session, pretrain_tables, sample_pretrain_stream, validation_set, DownstreamSet,
    PretrainStream, PretrainTables, SessionTables, Split, SplitSet,
};
pub use embed::{embedding_analysis, ClusterReport, EmbeddingAnalysis, ProjectionPoint};
pub use finetune::{finetune, init_head_store, FinetuneOutcome};
pub use pretrain::{init_seed, pretrain, select_checkpoint, CheckpointRecord, LogRecord, MetricKind, PretrainOutcome};
pub use results::{cross_eval, difference_from_optimal, CellKey, CellSummary, ResultTable, RESULTS_HEADER};

use crate::analysis::AnalysisError;
use crate::datagen::DataError;
use crate::encoder::EncoderError;
use crate::numerics::NumericsError;
use crate::popt::PoptError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite training loss for {model} at step {step}")]
    NonFiniteLoss { model: String, step: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("missing result cell: {0}")]
    MissingCell(String),
    #[error("malformed results: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Popt(#[from] PoptError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn config_error(field: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests;
