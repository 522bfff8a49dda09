use serde::{Deserialize, Serialize};

use super::clean::{clean_comment_with, clean_text_with, CleanOptions, SEPARATOR};
use crate::ingest::{CommentRecord, PostId, PostRecord, RecordStore};

/// Answer-selection thresholds, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerFilter {
    pub min_score: i64,
    pub min_comments: usize,
}

impl Default for AnswerFilter {
    fn default() -> Self {
        AnswerFilter {
            min_score: 1,
            min_comments: 1,
        }
    }
}

/// One pre-training unit: an answer followed by its comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainSample {
    pub answer_id: PostId,
    pub text: String,
    pub n_comments: usize,
    #[serde(skip)]
    pub char_len: usize,
    #[serde(skip)]
    pub token_len: Option<usize>,
}

impl PretrainSample {
    pub fn new(answer_id: PostId, text: String, n_comments: usize) -> Self {
        let char_len = text.chars().count();
        PretrainSample {
            answer_id,
            text,
            n_comments,
            char_len,
            token_len: None,
        }
    }
}

/// Answers passing `filter`, each with its comments in creation-date order,
/// ascending by answer id.
pub fn filter_answers<'s>(
    store: &'s RecordStore,
    filter: AnswerFilter,
) -> impl Iterator<Item = (&'s PostRecord, Vec<&'s CommentRecord>)> + 's {
    store
        .posts()
        .filter(move |p| p.is_answer() && p.score >= filter.min_score)
        .filter_map(move |p| {
            let comments: Vec<_> = store.comments_on(p.id).collect();
            (comments.len() >= filter.min_comments.max(1)).then_some((p, comments))
        })
}

/// Joins the cleaned answer and its comments with ` <RS> `.
///
/// Comments are re-sorted by `(creation_date, id)`. Returns `None` when
/// nothing but separators would remain.
pub fn assemble_sample(answer: &PostRecord, comments: &[&CommentRecord]) -> Option<PretrainSample> {
    assemble_sample_with(answer, comments, CleanOptions::default())
}

pub fn assemble_sample_with(
    answer: &PostRecord,
    comments: &[&CommentRecord],
    opts: CleanOptions,
) -> Option<PretrainSample> {
    assert!(!comments.is_empty(), "a sample needs at least one comment");
    let mut ordered = comments.to_vec();
    ordered.sort_by_key(|c| (c.creation_date, c.id));

    let head = clean_text_with(&answer.body, opts);
    let tails: Vec<String> = ordered
        .iter()
        .map(|c| clean_comment_with(&c.text, opts))
        .collect();
    if head.trim().is_empty() && tails.iter().all(|t| t.trim().is_empty()) {
        log::debug!("answer {}: empty after cleaning, skipped", answer.id);
        return None;
    }
    let mut text = head;
    for tail in &tails {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(SEPARATOR);
        if !tail.is_empty() {
            text.push(' ');
            text.push_str(tail);
        }
    }
    Some(PretrainSample::new(answer.id, text, tails.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub candidates: usize,
    pub samples: usize,
    pub skipped_empty: usize,
}

/// Filter and assemble every qualifying answer in the store.
pub fn build_samples(
    store: &RecordStore,
    filter: AnswerFilter,
) -> (Vec<PretrainSample>, AssemblyReport) {
    build_samples_with(store, filter, CleanOptions::default())
}

pub fn build_samples_with(
    store: &RecordStore,
    filter: AnswerFilter,
    opts: CleanOptions,
) -> (Vec<PretrainSample>, AssemblyReport) {
    let mut report = AssemblyReport::default();
    let mut out = Vec::new();
    for (answer, comments) in filter_answers(store, filter) {
        report.candidates += 1;
        match assemble_sample_with(answer, &comments, opts) {
            Some(s) => out.push(s),
            None => report.skipped_empty += 1,
        }
    }
    report.samples = out.len();
    (out, report)
}
