use serde::{Deserialize, Serialize};

use super::sample::PretrainSample;
use crate::bpe::BpeVocab;

pub const DEFAULT_BUCKET_EDGES: [usize; 3] = [512, 1024, 2048];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub label: String,
    pub lo: usize,
    /// Inclusive upper bound; `None` for the final open bucket.
    pub hi: Option<usize>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_samples: u64,
    pub n_comments_total: u64,
    pub comments_per_post_mean: f64,
    pub comments_per_post_median: f64,
    /// Unit of the histogram: `"tokens"` or `"chars"`.
    pub length_unit: String,
    pub length_histogram: Vec<LengthBucket>,
    pub total_tokens: Option<u64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("bucket edges must be non-empty and strictly increasing, got {0:?}")]
    BadEdges(Vec<usize>),
}

/// Empty buckets for `edges`: `0–e1`, `(e1+1)–e2`, ..., `>ek`.
pub fn make_buckets(edges: &[usize]) -> Result<Vec<LengthBucket>, StatsError> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StatsError::BadEdges(edges.to_vec()));
    }
    let mut out = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0;
    for &hi in edges {
        out.push(LengthBucket {
            label: format!("{lo}–{hi}"),
            lo,
            hi: Some(hi),
            count: 0,
        });
        lo = hi + 1;
    }
    let last = *edges.last().expect("non-empty");
    out.push(LengthBucket {
        label: format!(">{last}"),
        lo,
        hi: None,
        count: 0,
    });
    Ok(out)
}

pub fn bucket_index(buckets: &[LengthBucket], len: usize) -> usize {
    buckets
        .iter()
        .position(|b| b.hi.map_or(true, |hi| len <= hi))
        .expect("open bucket catches everything")
}

/// Lower median, so the result is always a value of the distribution.
fn lower_median(sorted: &[usize]) -> f64 {
    if sorted.is_empty() {
        0.0
    } else {
        sorted[(sorted.len() - 1) / 2] as f64
    }
}

/// Comment-count moments and a length histogram. With a tokenizer the
/// histogram is over token counts (and `token_len` is filled in), else over
/// characters.
pub fn corpus_stats(
    samples: &mut [PretrainSample],
    tokenizer: Option<&BpeVocab>,
    edges: &[usize],
) -> Result<CorpusStats, StatsError> {
    let mut buckets = make_buckets(edges)?;
    let mut counts: Vec<usize> = samples.iter().map(|s| s.n_comments).collect();
    counts.sort_unstable();
    let total: usize = counts.iter().sum();

    let mut total_tokens = tokenizer.map(|_| 0u64);
    for s in samples.iter_mut() {
        let len = match tokenizer {
            Some(vocab) => {
                let n = vocab.encode(&s.text).len();
                s.token_len = Some(n);
                *total_tokens.as_mut().expect("tokenizer present") += n as u64;
                n
            }
            None => s.char_len,
        };
        let i = bucket_index(&buckets, len);
        buckets[i].count += 1;
    }
    let n = samples.len();
    Ok(CorpusStats {
        n_samples: n as u64,
        n_comments_total: total as u64,
        comments_per_post_mean: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        comments_per_post_median: lower_median(&counts),
        length_unit: if tokenizer.is_some() {
            "tokens"
        } else {
            "chars"
        }
        .into(),
        length_histogram: buckets,
        total_tokens,
    })
}
