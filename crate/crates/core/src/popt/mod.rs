//! Population transformer over per-channel temporal embeddings.
//!
//! Tokens are `proj(embedding) + coordMLP(xyz)` with a learned CLS row in
//! front; a pre-norm encoder contextualizes them with full self-attention.
//! There is no sequence-position encoding, so the CLS output is invariant to
//! channel order. Pretraining is a two-part discrimination task: is the
//! ensemble consistent (CLS head), and which channels were swapped in from
//! another interval (channel head).

mod model;
mod objective;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use model::{
    assemble_tokens, channel_tokens, cls_representations, encoder_stack, forward_batch, popt_forward, with_cls,
    BatchOutput, Ensemble, LayerVars, PoptConfig, PoptVars, PoptWeights, TokenSequence,
};
pub use objective::{
    corrupt, decode_head, finetune_logits, finetune_loss_graph, pretrain_loss, pretrain_loss_and_grad,
    pretrain_loss_graph, DecodeHead, PretrainExample, PretrainMetrics, CORRUPTION_RATE,
};

#[derive(Debug, Error)]
pub enum PoptError {
    #[error("ensemble has no channels")]
    EmptyEnsemble,
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite activation in layer {layer} ({op})")]
    NonFinite { layer: usize, op: &'static str },
    #[error("inconsistent labels: {0}")]
    Labels(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint does not match: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PoptError>;

#[cfg(test)]
mod tests;
