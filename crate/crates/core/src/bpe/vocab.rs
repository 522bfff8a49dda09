use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use super::BpeError;
use crate::corpus::clean::{EMAIL_TOKEN, SEPARATOR, URL_TOKEN};

pub type TokenId = u32;

pub const N_BYTE_TOKENS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Mask,
    Pad,
    Separator,
    ClassMarker,
    Url,
    Email,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Mask,
        Special::Pad,
        Special::Separator,
        Special::ClassMarker,
        Special::Url,
        Special::Email,
    ];

    pub fn literal(self) -> &'static str {
        match self {
            Special::Mask => "<mask>",
            Special::Pad => "<pad>",
            Special::Separator => SEPARATOR,
            Special::ClassMarker => "<cls>",
            Special::Url => URL_TOKEN,
            Special::Email => EMAIL_TOKEN,
        }
    }

    pub fn id(self) -> TokenId {
        N_BYTE_TOKENS
            + Special::ALL
                .iter()
                .position(|s| *s == self)
                .expect("listed") as TokenId
    }
}

pub const N_SPECIALS: u32 = Special::ALL.len() as u32;
pub const FIRST_MERGE_ID: TokenId = N_BYTE_TOKENS + N_SPECIALS;
/// Smallest admissible vocabulary: bytes plus specials, no merges.
pub const MIN_VOCAB_SIZE: usize = FIRST_MERGE_ID as usize;

pub fn is_special(id: TokenId) -> bool {
    (N_BYTE_TOKENS..FIRST_MERGE_ID).contains(&id)
}

/// Byte-level BPE vocabulary.
///
/// Ids `0..256` are single bytes, `256..262` the specials in
/// [`Special::ALL`] order, and merge `k` creates id `262 + k`. Every token's
/// byte string is unique.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    merges: Vec<(TokenId, TokenId)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    by_bytes: HashMap<Vec<u8>, TokenId>,
    split_digits: bool,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.split_digits == other.split_digits
    }
}

impl Eq for BpeVocab {}

impl BpeVocab {
    pub fn byte_level(split_digits: bool) -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.extend(Special::ALL.iter().map(|s| s.literal().as_bytes().to_vec()));
        let by_bytes = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        BpeVocab {
            merges: Vec::new(),
            tokens,
            ranks: HashMap::new(),
            by_bytes,
            split_digits,
        }
    }

    /// Rebuilds a vocabulary from an ordered merge list.
    pub fn from_merges(
        merges: Vec<(TokenId, TokenId)>,
        split_digits: bool,
    ) -> Result<Self, BpeError> {
        let mut v = Self::byte_level(split_digits);
        for (k, &(l, r)) in merges.iter().enumerate() {
            let next = FIRST_MERGE_ID + k as u32;
            for id in [l, r] {
                if id >= next || is_special(id) {
                    return Err(BpeError::Format(format!(
                        "merge {k} references invalid token {id}"
                    )));
                }
            }
            if v.merged_exists(l, r) {
                return Err(BpeError::Format(format!(
                    "merge {k} duplicates an existing token"
                )));
            }
            v.push_merge(l, r);
        }
        Ok(v)
    }

    /// Whether merging `left`+`right` would recreate an existing token.
    pub(crate) fn merged_exists(&self, left: TokenId, right: TokenId) -> bool {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        self.by_bytes.contains_key(&bytes)
    }

    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<TokenId> {
        self.by_bytes.get(bytes).copied()
    }

    pub(crate) fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let id = self.tokens.len() as TokenId;
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        self.by_bytes.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn split_digits(&self) -> bool {
        self.split_digits
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn special_id(&self, s: Special) -> TokenId {
        s.id()
    }

    /// 64-bit checksum of the serialized vocabulary; stamped into token shards.
    pub fn checksum(&self) -> u64 {
        super::io::checksum_of(self)
    }

    /// Encodes text; special literals map to their reserved ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        for piece in split_atomic(bytes, self.split_digits) {
            match piece {
                Piece::Special(s) => out.push(s.id()),
                Piece::Bytes(chunk) => self.encode_chunk(chunk, &mut out),
            }
        }
        out
    }

    /// Applies merges to one chunk, lowest rank first, leftmost first among
    /// equal ranks.
    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        if chunk.len() < 2 || self.merges.is_empty() {
            out.extend(chunk.iter().map(|&b| b as TokenId));
            return;
        }
        let n = chunk.len();
        let mut sym: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        let mut next: Vec<usize> = (1..=n).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&r) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((r, i, sym[i], sym[i + 1])));
            }
        }
        while let Some(Reverse((rank, i, l, r))) = heap.pop() {
            if !alive[i] || sym[i] != l {
                continue;
            }
            let j = next[i];
            if j >= n || sym[j] != r {
                continue;
            }
            sym[i] = FIRST_MERGE_ID + rank;
            alive[j] = false;
            next[i] = next[j];
            if next[i] < n {
                prev[next[i]] = i;
            }
            let p = prev[i];
            if p < n {
                if let Some(&pr) = self.ranks.get(&(sym[p], sym[i])) {
                    heap.push(Reverse((pr, p, sym[p], sym[i])));
                }
            }
            let q = next[i];
            if q < n {
                if let Some(&qr) = self.ranks.get(&(sym[i], sym[q])) {
                    heap.push(Reverse((qr, i, sym[i], sym[q])));
                }
            }
        }
        let mut i = 0;
        while i < n {
            out.push(sym[i]);
            i = next[i];
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(BpeError::IdOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 with U+FFFD.
    pub fn decode_text(&self, ids: &[TokenId]) -> Result<String, BpeError> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Special(Special),
    Bytes(&'a [u8]),
}

fn special_at(bytes: &[u8], i: usize) -> Option<Special> {
    let first = bytes[i];
    if first != b'<' && first != b'[' {
        return None;
    }
    Special::ALL
        .iter()
        .copied()
        .filter(|s| bytes[i..].starts_with(s.literal().as_bytes()))
        .max_by_key(|s| s.literal().len())
}

/// Splits input into special literals and byte chunks no merge may cross.
/// With `split_digits`, each ASCII digit is its own chunk.
pub(crate) fn split_atomic(bytes: &[u8], split_digits: bool) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if let Some(s) = special_at(bytes, i) {
            if i > start {
                out.push(Piece::Bytes(&bytes[start..i]));
            }
            out.push(Piece::Special(s));
            i += s.literal().len();
            start = i;
        } else if split_digits && bytes[i].is_ascii_digit() {
            if i > start {
                out.push(Piece::Bytes(&bytes[start..i]));
            }
            out.push(Piece::Bytes(&bytes[i..i + 1]));
            i += 1;
            start = i;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        out.push(Piece::Bytes(&bytes[start..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_are_fixed() {
        assert_eq!(Special::Mask.id(), 256);
        assert_eq!(Special::Separator.id(), 258);
        assert_eq!(FIRST_MERGE_ID, 262);
        assert_eq!(MIN_VOCAB_SIZE, 262);
    }

    #[test]
    fn separator_is_atomic() {
        let v = BpeVocab::byte_level(false);
        let ids = v.encode("a <RS> b");
        assert_eq!(
            ids,
            vec![b'a' as u32, b' ' as u32, 258, b' ' as u32, b'b' as u32]
        );
        assert_eq!(v.decode(&[258]).unwrap(), b"<RS>");
    }

    #[test]
    fn empty_text() {
        assert!(BpeVocab::byte_level(false).encode("").is_empty());
    }

    #[test]
    fn out_of_range_decode() {
        let v = BpeVocab::byte_level(false);
        let n = v.vocab_size() as u32;
        assert!(matches!(v.decode(&[n]), Err(BpeError::IdOutOfRange { .. })));
    }

    #[test]
    fn merges_applied_by_rank() {
        // (a,b) then (ab,ab)
        let v = BpeVocab::from_merges(vec![(97, 98), (262, 262)], false).unwrap();
        assert_eq!(v.encode("abab"), vec![263]);
        assert_eq!(v.encode("ababa"), vec![263, 97]);
        assert_eq!(v.encode("aab"), vec![97, 262]);
    }

    #[test]
    fn overlapping_pair_merges_left_first() {
        let v = BpeVocab::from_merges(vec![(97, 97)], false).unwrap();
        assert_eq!(v.encode("aaa"), vec![262, 97]);
        assert_eq!(v.encode("aaaa"), vec![262, 262]);
    }

    #[test]
    fn digit_split() {
        let v = BpeVocab::from_merges(vec![(b'1' as u32, b'2' as u32)], true).unwrap();
        assert_eq!(v.encode("12"), vec![b'1' as u32, b'2' as u32]);
        let v = BpeVocab::from_merges(vec![(b'1' as u32, b'2' as u32)], false).unwrap();
        assert_eq!(v.encode("12"), vec![262]);
    }

    #[test]
    fn invalid_merge_reference() {
        assert!(BpeVocab::from_merges(vec![(300, 1)], false).is_err());
        assert!(BpeVocab::from_merges(vec![(Special::Mask.id(), 1)], false).is_err());
    }
}
