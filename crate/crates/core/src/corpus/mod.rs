//! Answer filtering, text cleaning, `<RS>` sample assembly, corpus
//! statistics and corpus/shard output.

pub mod clean;
pub mod sample;
pub mod shard;
pub mod stats;

pub use clean::{
    clean_comment, clean_comment_with, clean_text, clean_text_with, extract_code, split_code_spans,
    CleanOptions, Segment, SEPARATOR,
};
pub use sample::{
    assemble_sample, assemble_sample_with, build_samples, build_samples_with, filter_answers,
    AnswerFilter, AssemblyReport, PretrainSample,
};
pub use shard::{
    read_jsonl_corpus, write_corpus, CorpusFormat, CorpusManifest, ShardError, TokenShard,
};
pub use stats::{corpus_stats, CorpusStats, LengthBucket, StatsError, DEFAULT_BUCKET_EDGES};
