use super::masking::MaskedBatch;
use super::model::{EncoderModel, Grads};
use super::ops;
use super::MlmError;
use crate::scalar::Scalar;

/// Mean cross-entropy over labeled positions, plus the full `[B×T×V]`
/// logits.
pub fn forward_mlm<T: Scalar>(
    model: &EncoderModel<T>,
    batch: &MaskedBatch,
) -> Result<(T, Vec<T>), MlmError> {
    if batch.n_labeled() == 0 {
        return Err(MlmError::NoLabels);
    }
    let v = model.config().vocab_size;
    let d = model.config().hidden;
    let mut logits = Vec::with_capacity(batch.batch_size * batch.seq_len * v);
    for r in 0..batch.batch_size {
        let (ids, attend, _) = batch.row(r);
        let cache = model.forward_seq(ids, attend)?;
        for t in 0..batch.seq_len {
            logits.extend(model.mlm_logits(&cache.hidden[t * d..(t + 1) * d]));
        }
    }
    let loss = masked_cross_entropy(&logits, &batch.labels, v)?;
    Ok((loss, logits))
}

/// Mean cross-entropy of `[N×V]` logits over the rows whose label is set.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[Option<u32>],
    v: usize,
) -> Result<T, MlmError> {
    let mut total = T::zero();
    let mut n = 0usize;
    for (row, label) in logits.chunks(v).zip(labels) {
        if let Some(y) = label {
            let y = check_label(*y, v)?;
            total += ops::log_sum_exp(row) - row[y];
            n += 1;
        }
    }
    if n == 0 {
        return Err(MlmError::NoLabels);
    }
    Ok(total / T::lit(n as f64))
}

fn check_label(y: u32, v: usize) -> Result<usize, MlmError> {
    if y as usize >= v {
        return Err(MlmError::IdOutOfRange {
            id: y,
            vocab_size: v,
        });
    }
    Ok(y as usize)
}

/// Summed cross-entropy over the labeled positions of `batches`. When
/// `grads` is given, accumulates `scale · ∂loss_sum/∂θ`.
///
/// Logits are computed only at labeled positions.
pub fn mlm_loss_sum<T: Scalar>(
    model: &EncoderModel<T>,
    batches: &[MaskedBatch],
    scale: T,
    mut grads: Option<&mut Grads<T>>,
) -> Result<(T, usize), MlmError> {
    let v = model.config().vocab_size;
    let d = model.config().hidden;
    let mut total = T::zero();
    let mut n_labeled = 0;
    for batch in batches {
        for r in 0..batch.batch_size {
            let (ids, attend, labels) = batch.row(r);
            if labels.iter().all(Option::is_none) {
                continue;
            }
            let cache = model.forward_seq(ids, attend)?;
            let mut d_hidden = grads.as_ref().map(|_| vec![T::zero(); cache.hidden.len()]);
            for (t, label) in labels.iter().enumerate() {
                let Some(y) = label else { continue };
                let y = check_label(*y, v)?;
                n_labeled += 1;
                let h = &cache.hidden[t * d..(t + 1) * d];
                let row = model.mlm_logits(h);
                let lse = ops::log_sum_exp(&row);
                total += lse - row[y];
                if let (Some(g), Some(dh_all)) = (grads.as_deref_mut(), d_hidden.as_mut()) {
                    let mut dl: Vec<T> = row.iter().map(|&z| (z - lse).exp() * scale).collect();
                    dl[y] -= scale;
                    let dh = model.mlm_head_backward(h, &dl, g);
                    ops::add_assign(&mut dh_all[t * d..(t + 1) * d], &dh);
                }
            }
            if let (Some(g), Some(dh_all)) = (grads.as_deref_mut(), d_hidden.as_ref()) {
                model.backward_seq(&cache, dh_all, g);
            }
        }
    }
    Ok((total, n_labeled))
}
