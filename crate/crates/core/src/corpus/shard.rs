//! Corpus serialization.
//!
//! JSON-Lines: one `{"answer_id", "text", "n_comments"}` object per line.
//!
//! Token shard (`SOTK1`), little-endian:
//!
//! ```text
//! magic           5 bytes "SOTK1"
//! vocab checksum  u64
//! per sample:     u32 token count, then that many u32 token ids
//! ```
//!
//! Index sidecar (`<shard>.idx`): magic `SOTX1`, u64 sample count, then one
//! u64 token offset per sample (offset of its first token in the
//! concatenation of all samples).
//!
//! Every output gets a `<file>.manifest.json` with counts and a SHA-256 of the
//! main file.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sample::PretrainSample;
use crate::bpe::{BpeVocab, TokenId};

pub const SHARD_MAGIC: &[u8; 5] = b"SOTK1";
pub const INDEX_MAGIC: &[u8; 5] = b"SOTX1";

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("shard {path} was written with vocab {found:016x}, expected {expected:016x}")]
    VocabMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("token shards need a tokenizer")]
    MissingTokenizer,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ShardError + '_ {
    move |source| ShardError::Io {
        path: path.to_owned(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> ShardError {
    ShardError::Format {
        path: path.to_owned(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    JsonLines,
    TokenShard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: CorpusFormat,
    pub file: String,
    pub n_samples: u64,
    pub n_comments_total: u64,
    pub skipped_empty: u64,
    pub total_tokens: Option<u64>,
    pub sha256: String,
    pub vocab_checksum: Option<String>,
    pub seed: Option<u64>,
}

pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> Result<String, ShardError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes samples in the requested format plus a manifest next to `path`.
pub fn write_corpus(
    samples: &[PretrainSample],
    path: &Path,
    format: CorpusFormat,
    tokenizer: Option<&BpeVocab>,
    skipped_empty: u64,
    seed: Option<u64>,
) -> Result<CorpusManifest, ShardError> {
    let mut total_tokens = None;
    let mut vocab_checksum = None;
    match format {
        CorpusFormat::JsonLines => {
            let file = File::create(path).map_err(io_err(path))?;
            let mut w = BufWriter::new(file);
            for s in samples {
                serde_json::to_writer(&mut w, s).map_err(|e| io_err(path)(e.into()))?;
                w.write_all(b"\n").map_err(io_err(path))?;
            }
            w.flush().map_err(io_err(path))?;
        }
        CorpusFormat::TokenShard => {
            let vocab = tokenizer.ok_or(ShardError::MissingTokenizer)?;
            let encoded: Vec<Vec<TokenId>> =
                samples.iter().map(|s| vocab.encode(&s.text)).collect();
            let shard = TokenShard::from_sequences(vocab.checksum(), encoded);
            shard.write(path)?;
            total_tokens = Some(shard.total_tokens());
            vocab_checksum = Some(format!("{:016x}", vocab.checksum()));
        }
    }
    let manifest = CorpusManifest {
        format,
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        n_samples: samples.len() as u64,
        n_comments_total: samples.iter().map(|s| s.n_comments as u64).sum(),
        skipped_empty,
        total_tokens,
        sha256: sha256_file(path)?,
        vocab_checksum,
        seed,
    };
    let mpath = sidecar(path, ".manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_jsonl_corpus(path: &Path) -> Result<Vec<PretrainSample>, ShardError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PretrainSample = serde_json::from_str(&line)
            .map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(PretrainSample::new(s.answer_id, s.text, s.n_comments));
    }
    Ok(out)
}

/// Token sequences held in one flat buffer; immutable once built and safe to
/// share between readers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenShard {
    vocab_checksum: u64,
    tokens: Vec<TokenId>,
    offsets: Vec<u64>,
}

impl TokenShard {
    pub fn from_sequences(
        vocab_checksum: u64,
        seqs: impl IntoIterator<Item = Vec<TokenId>>,
    ) -> Self {
        let mut tokens = Vec::new();
        let mut offsets = Vec::new();
        for s in seqs {
            offsets.push(tokens.len() as u64);
            tokens.extend(s);
        }
        TokenShard {
            vocab_checksum,
            tokens,
            offsets,
        }
    }

    pub fn vocab_checksum(&self) -> u64 {
        self.vocab_checksum
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.len() as u64
    }

    pub fn sample(&self, i: usize) -> &[TokenId] {
        let start = self.offsets[i] as usize;
        let end = self
            .offsets
            .get(i + 1)
            .map_or(self.tokens.len(), |&o| o as usize);
        &self.tokens[start..end]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[TokenId]> {
        (0..self.len()).map(|i| self.sample(i))
    }

    pub fn write(&self, path: &Path) -> Result<(), ShardError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
        put(SHARD_MAGIC)?;
        put(&self.vocab_checksum.to_le_bytes())?;
        for s in self.samples() {
            put(&(s.len() as u32).to_le_bytes())?;
            for &t in s {
                put(&t.to_le_bytes())?;
            }
        }
        w.flush().map_err(io_err(path))?;

        let ipath = sidecar(path, ".idx");
        let mut idx = Vec::with_capacity(13 + 8 * self.offsets.len());
        idx.extend_from_slice(INDEX_MAGIC);
        idx.extend_from_slice(&(self.offsets.len() as u64).to_le_bytes());
        for &o in &self.offsets {
            idx.extend_from_slice(&o.to_le_bytes());
        }
        fs::write(&ipath, idx).map_err(io_err(&ipath))
    }

    /// Reads a shard, rejecting it when `expected_vocab` is given and differs
    /// from the stamped checksum.
    pub fn open(path: &Path, expected_vocab: Option<u64>) -> Result<Self, ShardError> {
        let data = fs::read(path).map_err(io_err(path))?;
        if data.len() < 13 || &data[..5] != SHARD_MAGIC {
            return Err(format_err(path, "not a token shard (bad magic)"));
        }
        let checksum = u64::from_le_bytes(data[5..13].try_into().expect("8 bytes"));
        if let Some(expected) = expected_vocab {
            if expected != checksum {
                return Err(ShardError::VocabMismatch {
                    path: path.to_owned(),
                    expected,
                    found: checksum,
                });
            }
        }
        let words = &data[13..];
        if words.len() % 4 != 0 {
            return Err(format_err(path, "truncated shard"));
        }
        let mut it = words
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut tokens = Vec::with_capacity(words.len() / 4);
        let mut offsets = Vec::new();
        while let Some(n) = it.next() {
            offsets.push(tokens.len() as u64);
            for _ in 0..n {
                tokens.push(
                    it.next()
                        .ok_or_else(|| format_err(path, "truncated shard sample"))?,
                );
            }
        }
        Ok(TokenShard {
            vocab_checksum: checksum,
            tokens,
            offsets,
        })
    }

    pub fn read_index(path: &Path) -> Result<Vec<u64>, ShardError> {
        let ipath = sidecar(path, ".idx");
        let data = fs::read(&ipath).map_err(io_err(&ipath))?;
        if data.len() < 13 || &data[..5] != INDEX_MAGIC {
            return Err(format_err(&ipath, "not a shard index"));
        }
        let n = u64::from_le_bytes(data[5..13].try_into().expect("8 bytes")) as usize;
        let body = &data[13..];
        if body.len() != n * 8 {
            return Err(format_err(&ipath, "index length mismatch"));
        }
        Ok(body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
