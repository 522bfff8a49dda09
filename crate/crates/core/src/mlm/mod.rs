//! Masked-language-model engine: masking, batch planning, a pre-norm
//! transformer encoder with hand-written backward pass, MLM training and
//! classification fine-tuning.

mod checkpoint;
mod gradcheck;
mod heads;
mod loss;
mod masking;
mod model;
pub mod ops;
mod optim;
mod plan;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use heads::{
    attach_head, finetune, label_counts, Classifier, FinetuneConfig, FinetuneOutcome, HeadKind,
    LabeledExample, Pooling, Target,
};
pub use loss::{forward_mlm, masked_cross_entropy, mlm_loss_sum};
pub use masking::{mask_sequence, MaskedBatch, MaskedRow, MaskingConfig};
pub use model::{
    build_encoder, BlockKind, EncoderConfig, EncoderModel, Grads, SeqCache, Tensor, INIT_STD,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use plan::{plan_batches, BatchPlan};
pub use train::{train_mlm, train_step, write_loss_trace, ShardSampler, TrainOptions};

use crate::bpe::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum MlmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("hidden size {hidden} is not divisible by {n_heads} heads")]
    HeadsDivisibility { hidden: usize, n_heads: usize },
    #[error("mask rate {0} outside (0, 1)")]
    MaskRate(f64),
    #[error("sequence has no maskable positions")]
    NothingMaskable,
    #[error("batch has no labeled positions")]
    NoLabels,
    #[error("sequence length {len} exceeds max_positions {max_positions}")]
    TooLong { len: usize, max_positions: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("sequence input does not start with the class marker")]
    MissingClassMarker,
    #[error("shard vocabulary {shard:016x} does not match model vocabulary {model:016x}")]
    VocabMismatch { model: u64, shard: u64 },
    #[error("shard has no usable samples")]
    EmptyShard,
    #[error("non-finite loss or weights at step {step}")]
    NonFinite { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
