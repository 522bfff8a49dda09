use serde::{Deserialize, Serialize};

use super::MlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub micro_batch_seqs: usize,
    pub seq_len: usize,
    pub accumulation_steps: usize,
    pub effective_tokens: u64,
}

/// Smallest accumulation count whose `m·T·a` reaches `target_tokens`.
pub fn plan_batches(
    target_tokens: u64,
    micro_batch_seqs: usize,
    seq_len: usize,
) -> Result<BatchPlan, MlmError> {
    if target_tokens == 0 || micro_batch_seqs == 0 || seq_len == 0 {
        return Err(MlmError::Config(
            "batch planning arguments must be positive".into(),
        ));
    }
    let per_micro = micro_batch_seqs as u64 * seq_len as u64;
    let a = target_tokens.div_ceil(per_micro);
    Ok(BatchPlan {
        micro_batch_seqs,
        seq_len,
        accumulation_steps: a as usize,
        effective_tokens: per_micro * a,
    })
}
