use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MlmError;
use crate::bpe::{Special, TokenId};

/// Masking policy. Selected positions are replaced by the mask id, by a
/// random non-special id, or kept, in the configured proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
    pub specials: Vec<TokenId>,
    pub vocab_size: usize,
}

impl MaskingConfig {
    /// Policy for the byte-level BPE id layout.
    pub fn bpe(rate: f64, vocab_size: usize) -> Self {
        MaskingConfig {
            rate,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            mask_id: Special::Mask.id(),
            pad_id: Special::Pad.id(),
            specials: Special::ALL.iter().map(|s| s.id()).collect(),
            vocab_size,
        }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains(&id)
    }

    fn validate(&self) -> Result<(), MlmError> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(MlmError::MaskRate(self.rate));
        }
        if self.mask_fraction < 0.0
            || self.random_fraction < 0.0
            || self.mask_fraction + self.random_fraction > 1.0
        {
            return Err(MlmError::Config(
                "mask/random fractions must be non-negative and sum to at most 1".into(),
            ));
        }
        if (self.vocab_size as u64) <= self.specials.len() as u64 {
            return Err(MlmError::Config("vocabulary has no non-special ids".into()));
        }
        Ok(())
    }

    fn random_non_special<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        loop {
            let id = rng.gen_range(0..self.vocab_size as TokenId);
            if !self.is_special(id) {
                return id;
            }
        }
    }
}

/// One masked sequence before padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
}

impl MaskedRow {
    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

pub fn mask_sequence<R: Rng + ?Sized>(
    ids: &[TokenId],
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskedRow, MlmError> {
    cfg.validate()?;
    if ids.is_empty() || ids.iter().all(|&id| cfg.is_special(id)) {
        return Err(MlmError::NothingMaskable);
    }
    let mut input_ids = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if cfg.is_special(id) || !rng.gen_bool(cfg.rate) {
            continue;
        }
        labels[i] = Some(id);
        let r: f64 = rng.gen();
        if r < cfg.mask_fraction {
            input_ids[i] = cfg.mask_id;
        } else if r < cfg.mask_fraction + cfg.random_fraction {
            input_ids[i] = cfg.random_non_special(rng);
        }
    }
    Ok(MaskedRow { input_ids, labels })
}

/// Padded `[B×T]` batch. `labels[i]` is `None` at every position that is
/// not scored.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub input_ids: Vec<TokenId>,
    pub attention_mask: Vec<bool>,
    pub labels: Vec<Option<TokenId>>,
    pub mask_rate: f64,
}

impl MaskedBatch {
    /// Right-pads rows to the longest row.
    pub fn from_rows(rows: &[MaskedRow], pad_id: TokenId, mask_rate: f64) -> Self {
        let seq_len = rows.iter().map(|r| r.input_ids.len()).max().unwrap_or(0);
        Self::from_rows_padded(rows, seq_len, pad_id, mask_rate)
    }

    pub fn from_rows_padded(
        rows: &[MaskedRow],
        seq_len: usize,
        pad_id: TokenId,
        mask_rate: f64,
    ) -> Self {
        let b = rows.len();
        let mut input_ids = vec![pad_id; b * seq_len];
        let mut attention_mask = vec![false; b * seq_len];
        let mut labels = vec![None; b * seq_len];
        for (r, row) in rows.iter().enumerate() {
            let n = row.input_ids.len().min(seq_len);
            input_ids[r * seq_len..r * seq_len + n].copy_from_slice(&row.input_ids[..n]);
            attention_mask[r * seq_len..r * seq_len + n]
                .iter_mut()
                .for_each(|m| *m = true);
            labels[r * seq_len..r * seq_len + n].copy_from_slice(&row.labels[..n]);
        }
        MaskedBatch {
            batch_size: b,
            seq_len,
            input_ids,
            attention_mask,
            labels,
            mask_rate,
        }
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn row(&self, i: usize) -> (&[TokenId], &[bool], &[Option<TokenId>]) {
        let r = i * self.seq_len..(i + 1) * self.seq_len;
        (
            &self.input_ids[r.clone()],
            &self.attention_mask[r.clone()],
            &self.labels[r],
        )
    }

    /// Concatenates batches of equal `seq_len` along the batch axis.
    pub fn concat(parts: &[MaskedBatch]) -> Self {
        let seq_len = parts.first().map_or(0, |p| p.seq_len);
        assert!(
            parts.iter().all(|p| p.seq_len == seq_len),
            "seq_len differs"
        );
        MaskedBatch {
            batch_size: parts.iter().map(|p| p.batch_size).sum(),
            seq_len,
            input_ids: parts
                .iter()
                .flat_map(|p| p.input_ids.iter().copied())
                .collect(),
            attention_mask: parts
                .iter()
                .flat_map(|p| p.attention_mask.iter().copied())
                .collect(),
            labels: parts
                .iter()
                .flat_map(|p| p.labels.iter().copied())
                .collect(),
            mask_rate: parts.first().map_or(0.0, |p| p.mask_rate),
        }
    }

    /// Splits into batches of `m` rows (the last may be shorter).
    pub fn split(&self, m: usize) -> Vec<MaskedBatch> {
        let t = self.seq_len;
        (0..self.batch_size)
            .step_by(m.max(1))
            .map(|start| {
                let end = (start + m).min(self.batch_size);
                let r = start * t..end * t;
                MaskedBatch {
                    batch_size: end - start,
                    seq_len: t,
                    input_ids: self.input_ids[r.clone()].to_vec(),
                    attention_mask: self.attention_mask[r.clone()].to_vec(),
                    labels: self.labels[r].to_vec(),
                    mask_rate: self.mask_rate,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_ids(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| (i % 250) as TokenId).collect()
    }

    #[test]
    fn masked_count_within_binomial_bounds() {
        let cfg = MaskingConfig::bpe(0.15, 400);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row = mask_sequence(&plain_ids(10_000), &cfg, &mut rng).unwrap();
        let k = row.n_labeled();
        assert!((1350..=1650).contains(&k), "{k}");
    }

    #[test]
    fn split_of_replacements() {
        let cfg = MaskingConfig::bpe(0.5, 400);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids = plain_ids(40_000);
        let row = mask_sequence(&ids, &cfg, &mut rng).unwrap();
        let (mut masked, mut kept, mut other) = (0, 0, 0);
        for ((&orig, &inp), lab) in ids.iter().zip(&row.input_ids).zip(&row.labels) {
            match lab {
                None => assert_eq!(orig, inp),
                Some(l) => {
                    assert_eq!(*l, orig);
                    if inp == cfg.mask_id {
                        masked += 1;
                    } else if inp == orig {
                        kept += 1;
                    } else {
                        assert!(!cfg.is_special(inp));
                        other += 1;
                    }
                }
            }
        }
        let n = (masked + kept + other) as f64;
        assert!((masked as f64 / n - 0.8).abs() < 0.02);
        // random replacement can coincide with the original id
        assert!(((kept + other) as f64 / n - 0.2).abs() < 0.02);
    }

    #[test]
    fn specials_never_masked() {
        let cfg = MaskingConfig::bpe(0.9, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<TokenId> = (0..2000)
            .map(|i| if i % 3 == 0 { 258 } else { 65 })
            .collect();
        let row = mask_sequence(&ids, &cfg, &mut rng).unwrap();
        for (i, l) in row.labels.iter().enumerate() {
            if i % 3 == 0 {
                assert!(l.is_none());
                assert_eq!(row.input_ids[i], 258);
            }
        }
    }

    #[test]
    fn only_specials_is_an_error() {
        let cfg = MaskingConfig::bpe(0.15, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            mask_sequence(&[258, 258], &cfg, &mut rng),
            Err(MlmError::NothingMaskable)
        ));
        assert!(matches!(
            mask_sequence(&[], &cfg, &mut rng),
            Err(MlmError::NothingMaskable)
        ));
    }

    #[test]
    fn rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rate in [0.0, 1.0, -0.1, 1.5] {
            let cfg = MaskingConfig::bpe(rate, 300);
            assert!(matches!(
                mask_sequence(&[1, 2], &cfg, &mut rng),
                Err(MlmError::MaskRate(_))
            ));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = MaskingConfig::bpe(0.15, 300);
        let ids = plain_ids(500);
        let a = mask_sequence(&ids, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = mask_sequence(&ids, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_layout() {
        let rows = vec![
            MaskedRow {
                input_ids: vec![5, 6, 7],
                labels: vec![None, Some(9), None],
            },
            MaskedRow {
                input_ids: vec![8],
                labels: vec![Some(8)],
            },
        ];
        let b = MaskedBatch::from_rows(&rows, 257, 0.15);
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.input_ids, vec![5, 6, 7, 8, 257, 257]);
        assert_eq!(b.attention_mask, vec![true, true, true, true, false, false]);
        assert_eq!(b.n_labeled(), 2);
        let parts = b.split(1);
        assert_eq!(MaskedBatch::concat(&parts), b);
    }
}
