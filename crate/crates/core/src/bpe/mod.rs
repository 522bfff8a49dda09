//! Byte-level byte-pair-encoding tokenizer.

pub mod io;
pub mod train;
pub mod vocab;

pub use io::{load_vocab, save_vocab, vocab_from_bytes, vocab_to_bytes};
pub use train::{train_bpe, BpeTrainer};
pub use vocab::{
    is_special, BpeVocab, Special, TokenId, FIRST_MERGE_ID, MIN_VOCAB_SIZE, N_SPECIALS,
};

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("vocab_size {requested} is below the minimum {minimum} (256 bytes + specials)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("sample_fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("training corpus is empty after sampling")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocab of size {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("vocab checksum mismatch: expected {expected:016x}, found {found:016x}")]
    ChecksumMismatch { expected: u64, found: u64 },
    #[error("unsupported vocab version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("malformed vocab: {0}")]
    Format(String),
    #[error("i/o error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}
