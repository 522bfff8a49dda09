use serde::Serialize;

use super::loss::mlm_loss_sum;
use super::masking::MaskedBatch;
use super::model::EncoderModel;
use super::MlmError;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub n_checked: usize,
}

/// Compares the analytic gradient of the mean MLM loss against central
/// differences for every parameter.
pub fn grad_check(
    model: &EncoderModel<f64>,
    batch: &MaskedBatch,
    eps: f64,
) -> Result<GradCheckReport, MlmError> {
    let batches = std::slice::from_ref(batch);
    let n = batch.n_labeled();
    if n == 0 {
        return Err(MlmError::NoLabels);
    }
    let scale = 1.0 / n as f64;
    let mut grads = model.zero_grads();
    mlm_loss_sum(model, batches, scale, Some(&mut grads))?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        n_checked: 0,
    };
    for ti in 0..model.tensors().len() {
        for j in 0..model.tensors()[ti].len() {
            let orig = probe.tensors()[ti].data[j];
            probe.tensors_mut()[ti].data[j] = orig + eps;
            let (plus, _) = mlm_loss_sum(&probe, batches, 1.0, None)?;
            probe.tensors_mut()[ti].data[j] = orig - eps;
            let (minus, _) = mlm_loss_sum(&probe, batches, 1.0, None)?;
            probe.tensors_mut()[ti].data[j] = orig;
            let numeric = (plus - minus) * scale / (2.0 * eps);
            let analytic = grads.tensors[ti][j];
            let err =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.n_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = model.tensors()[ti].name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlm::masking::MaskedRow;
    use crate::mlm::model::{build_encoder, BlockKind, EncoderConfig};

    fn batch(v: u32) -> MaskedBatch {
        let rows = vec![
            MaskedRow {
                input_ids: vec![1, 4 % v, 2, 7 % v, 3],
                labels: vec![None, Some(5 % v), None, Some(9 % v), None],
            },
            MaskedRow {
                input_ids: vec![6 % v, 0, 11 % v],
                labels: vec![Some(1), None, None],
            },
        ];
        MaskedBatch::from_rows(&rows, 0, 0.15)
    }

    fn model(l: usize, blocks: BlockKind, tie: bool) -> EncoderModel<f64> {
        let cfg = EncoderConfig {
            max_positions: 8,
            seed: 17,
            blocks,
            tie_head: tie,
            ..EncoderConfig::new(l, 8, 2, 20)
        };
        let mut m = build_encoder(&cfg).unwrap();
        // move away from the near-zero init so every path carries signal
        for t in m
            .tensors_mut()
            .iter_mut()
            .filter(|t| !t.name.ends_with("gain"))
        {
            for (i, x) in t.data.iter_mut().enumerate() {
                *x = *x * 10.0 + 0.01 * (i % 3) as f64;
            }
        }
        m
    }

    #[test]
    fn one_layer_full() {
        let r = grad_check(&model(1, BlockKind::Full, false), &batch(20), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tied_head() {
        let r = grad_check(&model(2, BlockKind::Full, true), &batch(20), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn linear_probe() {
        let r = grad_check(&model(0, BlockKind::Full, false), &batch(20), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn large_epsilon_is_detected() {
        let r = grad_check(&model(1, BlockKind::Full, false), &batch(20), 1e-1).unwrap();
        assert!(r.max_rel_error > 1e-4, "{r:?}");
    }
}
