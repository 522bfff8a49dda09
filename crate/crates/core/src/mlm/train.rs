use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::mlm_loss_sum;
use super::masking::{mask_sequence, MaskedBatch, MaskedRow, MaskingConfig};
use super::model::EncoderModel;
use super::optim::{Optimizer, OptimizerConfig};
use super::plan::BatchPlan;
use super::MlmError;
use crate::bpe::TokenId;
use crate::corpus::TokenShard;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub masking: MaskingConfig,
    pub seed: u64,
}

/// One optimizer step over `micro_batches`, normalizing by the labeled
/// position count of the whole set, so splitting a batch into micro-batches
/// leaves the update unchanged. Returns the mean loss.
pub fn train_step<T: Scalar>(
    model: &mut EncoderModel<T>,
    optimizer: &mut Optimizer<T>,
    micro_batches: &[MaskedBatch],
) -> Result<T, MlmError> {
    let step = optimizer.steps_taken();
    let n: usize = micro_batches.iter().map(MaskedBatch::n_labeled).sum();
    if n == 0 {
        return Err(MlmError::NoLabels);
    }
    let scale = T::one() / T::lit(n as f64);
    let mut grads = model.zero_grads();
    let (sum, _) = mlm_loss_sum(model, micro_batches, scale, Some(&mut grads))?;
    let loss = sum * scale;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(MlmError::NonFinite { step });
    }
    let mut params: Vec<&mut [T]> = model
        .tensors_mut()
        .iter_mut()
        .map(|t| &mut t.data[..])
        .collect();
    optimizer.step(&mut params, &grads.tensors);
    if !model.all_finite() {
        return Err(MlmError::NonFinite { step });
    }
    Ok(loss)
}

/// Draws masked micro-batches of random windows from a token shard.
pub struct ShardSampler<'a> {
    shard: &'a TokenShard,
    usable: Vec<usize>,
    masking: MaskingConfig,
    rng: ChaCha8Rng,
}

impl<'a> ShardSampler<'a> {
    pub fn new(shard: &'a TokenShard, masking: MaskingConfig, seed: u64) -> Result<Self, MlmError> {
        let usable: Vec<usize> = (0..shard.len())
            .filter(|&i| shard.sample(i).iter().any(|&id| !masking.is_special(id)))
            .collect();
        if usable.is_empty() {
            return Err(MlmError::EmptyShard);
        }
        Ok(ShardSampler {
            shard,
            usable,
            masking,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn window(&mut self, seq_len: usize) -> Vec<TokenId> {
        loop {
            let i = self.usable[self.rng.gen_range(0..self.usable.len())];
            let s = self.shard.sample(i);
            let start = if s.len() > seq_len {
                self.rng.gen_range(0..=s.len() - seq_len)
            } else {
                0
            };
            let w = &s[start..(start + seq_len).min(s.len())];
            if w.iter().any(|&id| !self.masking.is_special(id)) {
                return w.to_vec();
            }
        }
    }

    pub fn next_batch(&mut self, rows: usize, seq_len: usize) -> Result<MaskedBatch, MlmError> {
        let mut out = Vec::with_capacity(rows);
        for _ in 0..rows {
            let ids = self.window(seq_len);
            let mut row = mask_sequence(&ids, &self.masking, &mut self.rng)?;
            if row.n_labeled() == 0 {
                force_one(&mut row, &self.masking, &mut self.rng);
            }
            out.push(row);
        }
        Ok(MaskedBatch::from_rows_padded(
            &out,
            seq_len,
            self.masking.pad_id,
            self.masking.rate,
        ))
    }
}

// Short windows can come out with nothing selected; mask one position so
// every row contributes.
fn force_one(row: &mut MaskedRow, cfg: &MaskingConfig, rng: &mut ChaCha8Rng) {
    let cands: Vec<usize> = (0..row.input_ids.len())
        .filter(|&i| !cfg.is_special(row.input_ids[i]))
        .collect();
    let i = cands[rng.gen_range(0..cands.len())];
    row.labels[i] = Some(row.input_ids[i]);
    row.input_ids[i] = cfg.mask_id;
}

/// Pre-trains on windows drawn from `shard`, accumulating
/// `plan.accumulation_steps` micro-batches per optimizer step. Returns the
/// per-step mean loss.
pub fn train_mlm<T: Scalar>(
    model: &mut EncoderModel<T>,
    shard: &TokenShard,
    plan: &BatchPlan,
    opts: &TrainOptions,
) -> Result<Vec<f64>, MlmError> {
    if let Some(expected) = model.config().vocab_checksum {
        if expected != shard.vocab_checksum() {
            return Err(MlmError::VocabMismatch {
                model: expected,
                shard: shard.vocab_checksum(),
            });
        }
    }
    if plan.seq_len > model.config().max_positions {
        return Err(MlmError::TooLong {
            len: plan.seq_len,
            max_positions: model.config().max_positions,
        });
    }
    if opts.masking.vocab_size != model.config().vocab_size {
        return Err(MlmError::Config(
            "masking vocab size differs from the model".into(),
        ));
    }
    let mut sampler = ShardSampler::new(shard, opts.masking.clone(), opts.seed)?;
    let mut optimizer = Optimizer::new(opts.optimizer);
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let micro = (0..plan.accumulation_steps)
            .map(|_| sampler.next_batch(plan.micro_batch_seqs, plan.seq_len))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = train_step(model, &mut optimizer, &micro)?;
        log::debug!("step {step} loss {loss}");
        trace.push(loss.to_f64_lossy());
    }
    Ok(trace)
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()
}
