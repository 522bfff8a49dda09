//! Vocabulary file, little-endian throughout:
//!
//! ```text
//! magic        5 bytes  "SOBPE"
//! version      u16      1
//! flags        u8       bit 0: digits split into single-byte chunks
//! n_specials   u32
//!   id u32, len u32, literal bytes          (per special)
//! n_merges     u32
//!   len u32, left bytes, len u32, right bytes   (per merge, rank order)
//! checksum     u64      first 8 bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::vocab::{BpeVocab, Special, TokenId};
use super::BpeError;

pub const VOCAB_MAGIC: &[u8; 5] = b"SOBPE";
pub const VOCAB_VERSION: u16 = 1;

fn body_bytes(v: &BpeVocab) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VOCAB_MAGIC);
    out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
    out.push(u8::from(v.split_digits()));
    out.extend_from_slice(&(Special::ALL.len() as u32).to_le_bytes());
    for s in Special::ALL {
        out.extend_from_slice(&s.id().to_le_bytes());
        out.extend_from_slice(&(s.literal().len() as u32).to_le_bytes());
        out.extend_from_slice(s.literal().as_bytes());
    }
    out.extend_from_slice(&(v.merges().len() as u32).to_le_bytes());
    for &(l, r) in v.merges() {
        for id in [l, r] {
            let bytes = v.token_bytes(id).expect("merge parent in vocab");
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
    }
    out
}

fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub(crate) fn checksum_of(v: &BpeVocab) -> u64 {
    digest64(&body_bytes(v))
}

pub fn vocab_to_bytes(v: &BpeVocab) -> Vec<u8> {
    let mut out = body_bytes(v);
    let sum = digest64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BpeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| {
            BpeError::Format(format!("truncated vocab file at byte {}", self.pos))
        })?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BpeError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn vocab_from_bytes(data: &[u8]) -> Result<BpeVocab, BpeError> {
    if data.len() < VOCAB_MAGIC.len() + 2 + 1 + 8 {
        return Err(BpeError::Format("truncated vocab file".into()));
    }
    let (body, trailer) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if &body[..5] != VOCAB_MAGIC {
        return Err(BpeError::Format("not a vocab file (bad magic)".into()));
    }
    let version = u16::from_le_bytes([body[5], body[6]]);
    if version != VOCAB_VERSION {
        return Err(BpeError::Version {
            found: version,
            expected: VOCAB_VERSION,
        });
    }
    let computed = digest64(body);
    if computed != stored {
        return Err(BpeError::ChecksumMismatch {
            expected: stored,
            found: computed,
        });
    }
    let mut cur = Cursor { data: body, pos: 7 };
    let flags = cur.take(1)?[0];
    let n_specials = cur.u32()? as usize;
    if n_specials != Special::ALL.len() {
        return Err(BpeError::Format(format!(
            "expected {} specials, found {n_specials}",
            Special::ALL.len()
        )));
    }
    for s in Special::ALL {
        let id = cur.u32()?;
        let len = cur.u32()? as usize;
        let lit = cur.take(len)?;
        if id != s.id() || lit != s.literal().as_bytes() {
            return Err(BpeError::Format(format!(
                "special table mismatch at id {id}"
            )));
        }
    }
    let n_merges = cur.u32()? as usize;
    let mut vocab = BpeVocab::byte_level(flags & 1 == 1);
    for k in 0..n_merges {
        let mut pair = [0 as TokenId; 2];
        for slot in &mut pair {
            let len = cur.u32()? as usize;
            let bytes = cur.take(len)?;
            *slot = vocab
                .id_of_bytes(bytes)
                .ok_or_else(|| BpeError::Format(format!("merge {k} references unknown token")))?;
        }
        if vocab.merged_exists(pair[0], pair[1]) {
            return Err(BpeError::Format(format!(
                "merge {k} duplicates an existing token"
            )));
        }
        vocab.push_merge(pair[0], pair[1]);
    }
    if cur.pos != body.len() {
        return Err(BpeError::Format("trailing bytes in vocab file".into()));
    }
    Ok(vocab)
}

pub fn save_vocab(v: &BpeVocab, path: &Path) -> Result<(), BpeError> {
    fs::write(path, vocab_to_bytes(v)).map_err(|e| BpeError::Io(path.display().to_string(), e))
}

pub fn load_vocab(path: &Path) -> Result<BpeVocab, BpeError> {
    let data = fs::read(path).map_err(|e| BpeError::Io(path.display().to_string(), e))?;
    vocab_from_bytes(&data)
}
