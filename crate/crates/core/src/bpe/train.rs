//! Greedy BPE training over byte chunks.
//!
//! Each step merges the most frequent adjacent pair. Ties go to the pair whose
//! `(left bytes, right bytes)` sorts first. A pair whose concatenation already
//! exists as a token is never merged, which keeps token byte strings unique.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::vocab::{split_atomic, BpeVocab, Piece, TokenId, MIN_VOCAB_SIZE};
use super::BpeError;

#[derive(Debug, Clone, PartialEq)]
pub struct BpeTrainer {
    pub vocab_size: usize,
    pub sample_fraction: f64,
    pub seed: u64,
    pub split_digits: bool,
    /// Worker threads for pair counting; `0` uses the global pool.
    pub threads: usize,
}

impl Default for BpeTrainer {
    fn default() -> Self {
        BpeTrainer {
            vocab_size: 50_000,
            sample_fraction: 0.10,
            seed: 0,
            split_digits: false,
            threads: 0,
        }
    }
}

type Pair = (TokenId, TokenId);

struct Candidate {
    count: i64,
    left: Arc<[u8]>,
    right: Arc<[u8]>,
    pair: Pair,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Max-heap: higher count first, then lexicographically smaller bytes.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

struct Word {
    symbols: Vec<TokenId>,
    count: i64,
}

fn count_pairs(words: &[Word]) -> HashMap<Pair, i64> {
    words
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<Pair, i64>, w| {
            for p in w.symbols.windows(2) {
                *acc.entry((p[0], p[1])).or_insert(0) += w.count;
            }
            acc
        })
        .reduce(HashMap::new, |a, b| {
            if a.len() < b.len() {
                return merge_counts(b, a);
            }
            merge_counts(a, b)
        })
}

fn merge_counts(mut into: HashMap<Pair, i64>, from: HashMap<Pair, i64>) -> HashMap<Pair, i64> {
    for (k, v) in from {
        *into.entry(k).or_insert(0) += v;
    }
    into
}

/// Rewrites every non-overlapping occurrence of `pair`, left to right.
fn merge_word(symbols: &[TokenId], pair: Pair, new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

impl BpeTrainer {
    pub fn train<I, S>(&self, corpus: I) -> Result<BpeVocab, BpeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        if self.vocab_size < MIN_VOCAB_SIZE {
            return Err(BpeError::VocabTooSmall {
                requested: self.vocab_size,
                minimum: MIN_VOCAB_SIZE,
            });
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(BpeError::BadFraction(self.sample_fraction));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut chunk_counts: HashMap<Vec<u8>, i64> = HashMap::new();
        let mut kept = 0usize;
        for sample in corpus {
            if self.sample_fraction < 1.0 && rng.gen::<f64>() >= self.sample_fraction {
                continue;
            }
            kept += 1;
            for piece in split_atomic(sample.as_ref(), self.split_digits) {
                if let Piece::Bytes(chunk) = piece {
                    if chunk.len() >= 2 {
                        *chunk_counts.entry(chunk.to_vec()).or_insert(0) += 1;
                    }
                }
            }
        }
        if kept == 0 {
            return Err(BpeError::EmptyCorpus);
        }

        let run = || self.learn(chunk_counts);
        if self.threads == 0 {
            Ok(run())
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| BpeError::Format(format!("thread pool: {e}")))?;
            Ok(pool.install(run))
        }
    }

    fn learn(&self, chunk_counts: HashMap<Vec<u8>, i64>) -> BpeVocab {
        let mut vocab = BpeVocab::byte_level(self.split_digits);
        let mut chunks: Vec<(Vec<u8>, i64)> = chunk_counts.into_iter().collect();
        chunks.sort_unstable();
        let mut words: Vec<Word> = chunks
            .into_iter()
            .map(|(bytes, count)| Word {
                symbols: bytes.into_iter().map(TokenId::from).collect(),
                count,
            })
            .collect();

        let mut counts = count_pairs(&words);
        let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in w.symbols.windows(2) {
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }

        let mut bytes_of: Vec<Arc<[u8]>> = (0..vocab.vocab_size() as TokenId)
            .map(|id| Arc::from(vocab.token_bytes(id).expect("in range")))
            .collect();
        let candidate = |pair: Pair, count: i64, bytes_of: &[Arc<[u8]>]| Candidate {
            count,
            left: bytes_of[pair.0 as usize].clone(),
            right: bytes_of[pair.1 as usize].clone(),
            pair,
        };
        let mut heap: BinaryHeap<Candidate> = counts
            .iter()
            .map(|(&p, &c)| candidate(p, c, &bytes_of))
            .collect();

        while vocab.vocab_size() < self.vocab_size {
            let Some(best) = heap.pop() else { break };
            let current = counts.get(&best.pair).copied().unwrap_or(0);
            if current != best.count {
                continue;
            }
            if current < 2 {
                break;
            }
            if vocab.merged_exists(best.pair.0, best.pair.1) {
                continue;
            }
            let new_id = vocab.push_merge(best.pair.0, best.pair.1);
            bytes_of.push(Arc::from(vocab.token_bytes(new_id).expect("just added")));

            let mut delta: HashMap<Pair, i64> = HashMap::new();
            let mut affected: Vec<usize> = where_
                .remove(&best.pair)
                .unwrap_or_default()
                .into_iter()
                .collect();
            affected.sort_unstable();
            for wi in affected {
                let w = &mut words[wi];
                if !w.symbols.windows(2).any(|p| (p[0], p[1]) == best.pair) {
                    continue;
                }
                for p in w.symbols.windows(2) {
                    *delta.entry((p[0], p[1])).or_insert(0) -= w.count;
                }
                w.symbols = merge_word(&w.symbols, best.pair, new_id);
                for p in w.symbols.windows(2) {
                    let pair = (p[0], p[1]);
                    *delta.entry(pair).or_insert(0) += w.count;
                    where_.entry(pair).or_default().insert(wi);
                }
            }
            counts.remove(&best.pair);
            for (pair, d) in delta {
                if d == 0 || pair == best.pair {
                    continue;
                }
                let c = counts.entry(pair).or_insert(0);
                *c += d;
                let c = *c;
                if c <= 0 {
                    counts.remove(&pair);
                } else {
                    heap.push(candidate(pair, c, &bytes_of));
                }
            }
        }
        vocab
    }
}

/// Convenience wrapper over [`BpeTrainer::train`].
pub fn train_bpe<I, S>(
    corpus: I,
    vocab_size: usize,
    sample_fraction: f64,
    seed: u64,
) -> Result<BpeVocab, BpeError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    BpeTrainer {
        vocab_size,
        sample_fraction,
        seed,
        ..BpeTrainer::default()
    }
    .train(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::vocab::FIRST_MERGE_ID;

    /// Brute force: recount all pairs over the corpus at every step and pick
    /// the max by (count desc, left bytes asc, right bytes asc).
    fn oracle_merges(corpus: &[&str], n_merges: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut seqs: Vec<Vec<Vec<u8>>> = corpus
            .iter()
            .map(|s| s.bytes().map(|b| vec![b]).collect())
            .collect();
        let mut out = Vec::new();
        let mut existing: HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for _ in 0..n_merges {
            let mut freq: HashMap<(Vec<u8>, Vec<u8>), usize> = HashMap::new();
            for s in &seqs {
                for w in s.windows(2) {
                    *freq.entry((w[0].clone(), w[1].clone())).or_default() += 1;
                }
            }
            let best = freq
                .into_iter()
                .filter(|(p, c)| {
                    *c >= 2 && !existing.contains(&[p.0.clone(), p.1.clone()].concat())
                })
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            let joined = [l.clone(), r.clone()].concat();
            existing.insert(joined.clone());
            for s in seqs.iter_mut() {
                let mut merged = Vec::new();
                let mut i = 0;
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                        merged.push(joined.clone());
                        i += 2;
                    } else {
                        merged.push(s[i].clone());
                        i += 1;
                    }
                }
                *s = merged;
            }
            out.push((l, r));
        }
        out
    }

    fn merge_bytes(v: &BpeVocab) -> Vec<(Vec<u8>, Vec<u8>)> {
        v.merges()
            .iter()
            .map(|&(l, r)| {
                (
                    v.token_bytes(l).unwrap().to_vec(),
                    v.token_bytes(r).unwrap().to_vec(),
                )
            })
            .collect()
    }

    #[test]
    fn abab_two_merges() {
        let v = train_bpe(["abab abab"], MIN_VOCAB_SIZE + 2, 1.0, 0).unwrap();
        assert_eq!(
            merge_bytes(&v),
            vec![
                (b"a".to_vec(), b"b".to_vec()),
                (b"ab".to_vec(), b"ab".to_vec())
            ]
        );
        assert_eq!(v.encode("abab"), vec![FIRST_MERGE_ID + 1]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let corpus = [
            "the cat sat on the mat",
            "def foo(x):\n    return x + 1",
            "the the the hat",
            "aaaaaa bbbb aaaa",
        ];
        let v = train_bpe(corpus, MIN_VOCAB_SIZE + 40, 1.0, 0).unwrap();
        let expected = oracle_merges(&corpus, 40);
        assert_eq!(merge_bytes(&v), expected);
    }

    #[test]
    fn minimum_size_has_no_merges() {
        let v = train_bpe(["abab abab"], MIN_VOCAB_SIZE, 1.0, 0).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.vocab_size(), MIN_VOCAB_SIZE);
    }

    #[test]
    fn too_small_names_minimum() {
        let err = train_bpe(["x"], MIN_VOCAB_SIZE - 1, 1.0, 0).unwrap_err();
        assert!(err.to_string().contains(&MIN_VOCAB_SIZE.to_string()));
    }

    #[test]
    fn empty_after_sampling() {
        assert!(matches!(
            train_bpe(Vec::<&str>::new(), 300, 1.0, 0),
            Err(BpeError::EmptyCorpus)
        ));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_bpe(["abcdef"], 1000, 1.0, 0).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn merges_never_cross_specials() {
        let v = train_bpe(["ab<RS>ab<RS>ab<RS>b<"], 400, 1.0, 0).unwrap();
        for &(l, r) in v.merges() {
            let joined = [v.token_bytes(l).unwrap(), v.token_bytes(r).unwrap()].concat();
            assert!(
                !joined.contains(&b'<'),
                "{:?}",
                String::from_utf8_lossy(&joined)
            );
        }
    }
}
