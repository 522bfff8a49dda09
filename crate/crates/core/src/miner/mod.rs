//! Obsolete-answer candidate mining, annotation sampling and agreement.

mod annotate;
mod heuristics;
mod levenshtein;

pub use crate::corpus::extract_code;
pub use annotate::{
    cohen_kappa, export_candidates, import_annotations, paired_labels, read_candidates,
    sample_for_annotation, write_annotations, AnnotationRecord, AnnotationSample, Label, Shortfall,
    ANNOTATION_HEADER,
};
pub use heuristics::{
    mine_all, mine_edited_after_comment, mine_keyword_comments, mine_late_answers, Heuristic,
    MinerConfig, MiningReport, MiningResult, ObsoleteCandidate, LATE_AFTER_MS,
};
pub use levenshtein::levenshtein;

use crate::ingest::PostId;

#[derive(Debug, thiserror::Error)]
pub enum MinerError {
    #[error("no candidates to sample from")]
    NoCandidates,
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("kappa is undefined when chance agreement is 1")]
    KappaUndefined,
    #[error("invalid label `{0}`")]
    InvalidLabel(String),
    #[error("unknown candidate id {0}")]
    UnknownCandidate(PostId),
    #[error("candidate {candidate_id} labeled twice by {annotator}")]
    DuplicateAnnotation {
        candidate_id: PostId,
        annotator: String,
    },
    #[error("annotation file line {line}: {message}")]
    Tsv { line: usize, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
