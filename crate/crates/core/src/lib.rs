//! Corpus engineering for StackOverflow data dumps.

pub mod bpe;
pub mod corpus;
pub mod ingest;
pub mod metrics;
pub mod miner;
pub mod mlm;
pub mod planner;
pub mod scalar;

pub use scalar::Scalar;

pub type Encoder = mlm::EncoderModel<f32>;
pub type Encoder64 = mlm::EncoderModel<f64>;
pub type Classifier = mlm::Classifier<f32>;
pub type Classifier64 = mlm::Classifier<f64>;
