use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{EncoderModel, Grads, Tensor, INIT_STD};
use super::ops;
use super::optim::{Optimizer, OptimizerConfig};
use super::MlmError;
use crate::bpe::{Special, TokenId};
use crate::metrics::ClassWeights;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state at position 0.
    ClassMarker,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Sequence { n_classes: usize, pooling: Pooling },
    Token { n_classes: usize },
}

impl HeadKind {
    pub fn n_classes(&self) -> usize {
        match *self {
            HeadKind::Sequence { n_classes, .. } | HeadKind::Token { n_classes } => n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Sequence(usize),
    /// One optional label per token.
    Tokens(Vec<Option<usize>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub ids: Vec<TokenId>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub encoder: EncoderModel<T>,
    pub kind: HeadKind,
    /// Required first token of sequence-class inputs pooled at position 0.
    pub class_marker: Option<TokenId>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn attach_head<T: Scalar>(
    encoder: EncoderModel<T>,
    kind: HeadKind,
) -> Result<Classifier<T>, MlmError> {
    let c = kind.n_classes();
    if c < 2 {
        return Err(MlmError::Config(
            "a classifier needs at least two classes".into(),
        ));
    }
    let d = encoder.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(encoder.config().seed ^ 0x6865_6164);
    let class_marker = match kind {
        HeadKind::Sequence {
            pooling: Pooling::ClassMarker,
            ..
        } => {
            let id = Special::ClassMarker.id();
            ((id as usize) < encoder.config().vocab_size).then_some(id)
        }
        _ => None,
    };
    Ok(Classifier {
        weight: Tensor::normal("cls_head.w", &[d, c], INIT_STD, &mut rng),
        bias: Tensor::zeros("cls_head.b", &[c]),
        encoder,
        kind,
        class_marker,
    })
}

/// Per-class loss multipliers as `T`.
fn loss_weights<T: Scalar>(w: &ClassWeights<f64>, n_classes: usize) -> Result<Vec<T>, MlmError> {
    if w.weights.len() != n_classes {
        return Err(MlmError::Config(format!(
            "{} class weights for {n_classes} classes",
            w.weights.len()
        )));
    }
    if w.weights.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(MlmError::Config("class weights must be positive".into()));
    }
    Ok(w.weights.iter().map(|&x| T::lit(x)).collect())
}

/// Scored units of one example: (input row, label).
enum Unit {
    Position(usize),
    Pooled,
}

impl<T: Scalar> Classifier<T> {
    pub fn n_classes(&self) -> usize {
        self.kind.n_classes()
    }

    fn validate(&self, ex: &LabeledExample) -> Result<(), MlmError> {
        let c = self.n_classes();
        if ex.ids.is_empty() {
            return Err(MlmError::Config("empty example".into()));
        }
        match (&self.kind, &ex.target) {
            (HeadKind::Sequence { .. }, Target::Sequence(y)) => {
                if *y >= c {
                    return Err(MlmError::LabelOutOfRange {
                        label: *y,
                        n_classes: c,
                    });
                }
                if let Some(m) = self.class_marker {
                    if ex.ids[0] != m {
                        return Err(MlmError::MissingClassMarker);
                    }
                }
            }
            (HeadKind::Token { .. }, Target::Tokens(ls)) => {
                if ls.len() != ex.ids.len() {
                    return Err(MlmError::Config(
                        "token labels must align with tokens".into(),
                    ));
                }
                if let Some(&y) = ls.iter().flatten().find(|&&y| y >= c) {
                    return Err(MlmError::LabelOutOfRange {
                        label: y,
                        n_classes: c,
                    });
                }
            }
            _ => {
                return Err(MlmError::Config(
                    "target kind does not match the head".into(),
                ))
            }
        }
        Ok(())
    }

    fn units(&self, ex: &LabeledExample) -> Vec<(Unit, usize)> {
        match &ex.target {
            Target::Sequence(y) => vec![(Unit::Pooled, *y)],
            Target::Tokens(ls) => ls
                .iter()
                .enumerate()
                .filter_map(|(t, l)| l.map(|y| (Unit::Position(t), y)))
                .collect(),
        }
    }

    fn pooled(&self, hidden: &[T], n: usize) -> Vec<T> {
        let d = self.encoder.config().hidden;
        match self.kind {
            HeadKind::Sequence {
                pooling: Pooling::Mean,
                ..
            } => {
                let mut out = vec![T::zero(); d];
                ops::col_sum_acc(hidden, &mut out);
                let inv = T::one() / T::lit(n as f64);
                out.iter_mut().for_each(|x| *x *= inv);
                out
            }
            _ => hidden[..d].to_vec(),
        }
    }

    fn head_logits(&self, h: &[T]) -> Vec<T> {
        let d = self.encoder.config().hidden;
        let mut y = ops::matmul(h, &self.weight.data, 1, d, self.n_classes());
        ops::add_assign(&mut y, &self.bias.data);
        y
    }

    /// Class logits for every scored unit of `ex`, with labels.
    pub fn logits(&self, ex: &LabeledExample) -> Result<Vec<(Vec<T>, usize)>, MlmError> {
        self.validate(ex)?;
        let d = self.encoder.config().hidden;
        let n = ex.ids.len();
        let cache = self.encoder.forward_seq(&ex.ids, &vec![true; n])?;
        Ok(self
            .units(ex)
            .into_iter()
            .map(|(u, y)| {
                let h = match u {
                    Unit::Pooled => self.pooled(&cache.hidden, n),
                    Unit::Position(t) => cache.hidden[t * d..(t + 1) * d].to_vec(),
                };
                (self.head_logits(&h), y)
            })
            .collect())
    }

    /// `Σ w_y·CE / Σ w_y` over all scored units.
    pub fn weighted_loss(
        &self,
        examples: &[LabeledExample],
        weights: &ClassWeights<f64>,
    ) -> Result<T, MlmError> {
        let w: Vec<T> = loss_weights(weights, self.n_classes())?;
        let (mut num, mut den) = (T::zero(), T::zero());
        for ex in examples {
            for (z, y) in self.logits(ex)? {
                num += w[y] * (ops::log_sum_exp(&z) - z[y]);
                den += w[y];
            }
        }
        if den == T::zero() {
            return Err(MlmError::NoLabels);
        }
        Ok(num / den)
    }

    /// Accumulates gradients of the weighted loss over `batch`; returns it.
    fn loss_grad(
        &self,
        batch: &[&LabeledExample],
        w: &[T],
        enc_grads: &mut Grads<T>,
        head: &mut [Vec<T>; 2],
    ) -> Result<T, MlmError> {
        let d = self.encoder.config().hidden;
        let c = self.n_classes();
        let den: T = batch
            .iter()
            .flat_map(|ex| self.units(ex))
            .map(|(_, y)| w[y])
            .sum();
        if den == T::zero() {
            return Err(MlmError::NoLabels);
        }
        let mut loss = T::zero();
        for ex in batch {
            let n = ex.ids.len();
            let cache = self.encoder.forward_seq(&ex.ids, &vec![true; n])?;
            let mut d_hidden = vec![T::zero(); n * d];
            for (u, y) in self.units(ex) {
                let h = match u {
                    Unit::Pooled => self.pooled(&cache.hidden, n),
                    Unit::Position(t) => cache.hidden[t * d..(t + 1) * d].to_vec(),
                };
                let z = self.head_logits(&h);
                let lse = ops::log_sum_exp(&z);
                loss += w[y] * (lse - z[y]) / den;
                let s = w[y] / den;
                let mut dz: Vec<T> = z.iter().map(|&v| (v - lse).exp() * s).collect();
                dz[y] -= s;
                ops::matmul_tn_acc(&h, &dz, 1, d, c, &mut head[0]);
                ops::add_assign(&mut head[1], &dz);
                let dh = ops::matmul_nt(&dz, &self.weight.data, 1, c, d);
                match u {
                    Unit::Position(t) => ops::add_assign(&mut d_hidden[t * d..(t + 1) * d], &dh),
                    Unit::Pooled => match self.kind {
                        HeadKind::Sequence {
                            pooling: Pooling::Mean,
                            ..
                        } => {
                            let inv = T::one() / T::lit(n as f64);
                            for t in 0..n {
                                for k in 0..d {
                                    d_hidden[t * d + k] += dh[k] * inv;
                                }
                            }
                        }
                        _ => ops::add_assign(&mut d_hidden[..d], &dh),
                    },
                }
            }
            self.encoder.backward_seq(&cache, &d_hidden, enc_grads);
        }
        Ok(loss)
    }

    /// Argmax predictions with their gold labels, one pair per scored unit.
    pub fn predict(
        &self,
        examples: &[LabeledExample],
    ) -> Result<(Vec<usize>, Vec<usize>), MlmError> {
        let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
        for ex in examples {
            for (z, y) in self.logits(ex)? {
                let best = z
                    .iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                    )
                    .0;
                y_true.push(y);
                y_pred.push(best);
            }
        }
        Ok((y_true, y_pred))
    }
}

/// Per-class counts of scored units, for class weight computation.
pub fn label_counts(examples: &[LabeledExample], n_classes: usize) -> Result<Vec<u64>, MlmError> {
    let mut counts = vec![0u64; n_classes];
    for ex in examples {
        let labels: Vec<usize> = match &ex.target {
            Target::Sequence(y) => vec![*y],
            Target::Tokens(ls) => ls.iter().flatten().copied().collect(),
        };
        for y in labels {
            if y >= n_classes {
                return Err(MlmError::LabelOutOfRange {
                    label: y,
                    n_classes,
                });
            }
            counts[y] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            epochs: 3,
            optimizer: OptimizerConfig::momentum(1e-5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneOutcome {
    pub losses: Vec<f64>,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
}

/// Trains encoder and head with weighted cross-entropy on shuffled
/// mini-batches, then predicts on `eval`.
pub fn finetune<T: Scalar>(
    clf: &mut Classifier<T>,
    train: &[LabeledExample],
    eval: &[LabeledExample],
    weights: &ClassWeights<f64>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, MlmError> {
    if cfg.batch_size == 0 {
        return Err(MlmError::Config("batch_size must be positive".into()));
    }
    let w: Vec<T> = loss_weights(weights, clf.n_classes())?;
    for ex in train.iter().chain(eval) {
        clf.validate(ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
            if batch.iter().all(|ex| clf.units(ex).is_empty()) {
                continue;
            }
            let mut enc_grads = clf.encoder.zero_grads();
            let mut head = [
                vec![T::zero(); clf.weight.len()],
                vec![T::zero(); clf.bias.len()],
            ];
            let loss = clf.loss_grad(&batch, &w, &mut enc_grads, &mut head)?;
            if !loss.is_finite() {
                return Err(MlmError::NonFinite { step: losses.len() });
            }
            let mut grads = enc_grads.tensors;
            grads.extend(head);
            let Classifier {
                encoder,
                weight,
                bias,
                ..
            } = clf;
            let mut params: Vec<&mut [T]> = encoder
                .tensors_mut()
                .iter_mut()
                .map(|t| &mut t.data[..])
                .collect();
            params.push(&mut weight.data);
            params.push(&mut bias.data);
            opt.step(&mut params, &grads);
            losses.push(loss.to_f64_lossy());
        }
    }
    let (y_true, y_pred) = clf.predict(eval)?;
    Ok(FinetuneOutcome {
        losses,
        y_true,
        y_pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{class_weights, WeightMode};
    use crate::mlm::model::{build_encoder, EncoderConfig};

    fn encoder(v: usize) -> EncoderModel<f64> {
        build_encoder(&EncoderConfig {
            max_positions: 16,
            seed: 2,
            ..EncoderConfig::new(1, 8, 2, v)
        })
        .unwrap()
    }

    fn token_examples(n: usize, seed: u64) -> Vec<LabeledExample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let ids: Vec<TokenId> = (0..6).map(|_| rng.gen_range(0..40)).collect();
                let labels = ids.iter().map(|&i| Some((i % 2) as usize)).collect();
                LabeledExample {
                    ids,
                    target: Target::Tokens(labels),
                }
            })
            .collect()
    }

    #[test]
    fn uniform_weights_give_plain_cross_entropy() {
        let clf = attach_head(encoder(40), HeadKind::Token { n_classes: 2 }).unwrap();
        let exs = token_examples(5, 1);
        let loss = clf
            .weighted_loss(&exs, &ClassWeights::uniform_for(2))
            .unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for ex in &exs {
            for (z, y) in clf.logits(ex).unwrap() {
                total += ops::log_sum_exp(&z) - z[y];
                n += 1;
            }
        }
        assert!((loss - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn head_gradient_matches_differences() {
        let mut clf = attach_head(
            encoder(300),
            HeadKind::Sequence {
                n_classes: 3,
                pooling: Pooling::ClassMarker,
            },
        )
        .unwrap();
        for x in clf.weight.data.iter_mut() {
            *x *= 50.0;
        }
        let cm = Special::ClassMarker.id();
        let exs = vec![
            LabeledExample {
                ids: vec![cm, 5, 9],
                target: Target::Sequence(2),
            },
            LabeledExample {
                ids: vec![cm, 7],
                target: Target::Sequence(0),
            },
        ];
        let weights = ClassWeights {
            weights: vec![0.2, 0.5, 0.3],
            mode: WeightMode::InverseFrequency,
        };
        let w: Vec<f64> = loss_weights(&weights, 3).unwrap();
        let mut g = clf.encoder.zero_grads();
        let mut head = [vec![0.0; clf.weight.len()], vec![0.0; 3]];
        let refs: Vec<&LabeledExample> = exs.iter().collect();
        clf.loss_grad(&refs, &w, &mut g, &mut head).unwrap();
        let eps = 1e-6;
        for j in 0..clf.weight.len() {
            let orig = clf.weight.data[j];
            clf.weight.data[j] = orig + eps;
            let p = clf.weighted_loss(&exs, &weights).unwrap();
            clf.weight.data[j] = orig - eps;
            let m = clf.weighted_loss(&exs, &weights).unwrap();
            clf.weight.data[j] = orig;
            assert!(((p - m) / (2.0 * eps) - head[0][j]).abs() < 1e-7);
        }
        let tok = clf
            .encoder
            .tensors()
            .iter()
            .position(|t| t.name == "tok_emb")
            .unwrap();
        for j in (9 * 8)..(10 * 8) {
            let orig = clf.encoder.tensors()[tok].data[j];
            clf.encoder.tensors_mut()[tok].data[j] = orig + eps;
            let p = clf.weighted_loss(&exs, &weights).unwrap();
            clf.encoder.tensors_mut()[tok].data[j] = orig - eps;
            let m = clf.weighted_loss(&exs, &weights).unwrap();
            clf.encoder.tensors_mut()[tok].data[j] = orig;
            assert!(((p - m) / (2.0 * eps) - g.tensors[tok][j]).abs() < 1e-7);
        }
    }

    #[test]
    fn mean_pooling_gradient_matches_differences() {
        let mut clf = attach_head(
            encoder(40),
            HeadKind::Sequence {
                n_classes: 2,
                pooling: Pooling::Mean,
            },
        )
        .unwrap();
        assert_eq!(clf.class_marker, None);
        let exs = vec![LabeledExample {
            ids: vec![3, 5, 9],
            target: Target::Sequence(1),
        }];
        let weights = ClassWeights::uniform_for(2);
        let mut g = clf.encoder.zero_grads();
        let mut head = [vec![0.0; clf.weight.len()], vec![0.0; 2]];
        clf.loss_grad(&[&exs[0]], &[0.5, 0.5], &mut g, &mut head)
            .unwrap();
        let tok = 0;
        let eps = 1e-6;
        for j in (5 * 8)..(6 * 8) {
            let orig = clf.encoder.tensors()[tok].data[j];
            clf.encoder.tensors_mut()[tok].data[j] = orig + eps;
            let p = clf.weighted_loss(&exs, &weights).unwrap();
            clf.encoder.tensors_mut()[tok].data[j] = orig - eps;
            let m = clf.weighted_loss(&exs, &weights).unwrap();
            clf.encoder.tensors_mut()[tok].data[j] = orig;
            assert!(((p - m) / (2.0 * eps) - g.tensors[tok][j]).abs() < 1e-8);
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut clf = attach_head(encoder(40), HeadKind::Token { n_classes: 2 }).unwrap();
        let bad = vec![LabeledExample {
            ids: vec![1, 2],
            target: Target::Tokens(vec![Some(0), Some(2)]),
        }];
        let r = finetune(
            &mut clf,
            &bad,
            &[],
            &ClassWeights::uniform_for(2),
            &FinetuneConfig::default(),
        );
        assert!(matches!(
            r,
            Err(MlmError::LabelOutOfRange {
                label: 2,
                n_classes: 2
            })
        ));
        assert!(label_counts(&bad, 2).is_err());
    }

    #[test]
    fn missing_class_is_a_weight_error() {
        let cm = Special::ClassMarker.id();
        let exs: Vec<LabeledExample> = [0usize, 1, 0, 1]
            .iter()
            .map(|&y| LabeledExample {
                ids: vec![cm, 4],
                target: Target::Sequence(y),
            })
            .collect();
        let counts = label_counts(&exs, 3).unwrap();
        assert_eq!(counts, vec![2, 2, 0]);
        assert!(class_weights::<f64>(&counts, WeightMode::InverseFrequency).is_err());
    }

    #[test]
    fn sequence_inputs_need_class_marker() {
        let mut clf = attach_head(
            encoder(300),
            HeadKind::Sequence {
                n_classes: 2,
                pooling: Pooling::ClassMarker,
            },
        )
        .unwrap();
        let exs = vec![LabeledExample {
            ids: vec![4, 5],
            target: Target::Sequence(1),
        }];
        let r = finetune(
            &mut clf,
            &exs,
            &[],
            &ClassWeights::uniform_for(2),
            &FinetuneConfig::default(),
        );
        assert!(matches!(r, Err(MlmError::MissingClassMarker)));
    }

    #[test]
    fn parity_task_is_learned() {
        let train = token_examples(256, 3);
        let eval = token_examples(64, 4);
        let counts = label_counts(&train, 2).unwrap();
        let weights = class_weights(&counts, WeightMode::InverseFrequency).unwrap();
        let mut clf = attach_head(encoder(40), HeadKind::Token { n_classes: 2 }).unwrap();
        let cfg = FinetuneConfig {
            epochs: 20,
            optimizer: OptimizerConfig::adam(1e-2),
            ..FinetuneConfig::default()
        };
        let out = finetune(&mut clf, &train, &eval, &weights, &cfg).unwrap();
        let acc = out
            .y_true
            .iter()
            .zip(&out.y_pred)
            .filter(|(a, b)| a == b)
            .count() as f64
            / out.y_true.len() as f64;
        assert!(acc > 0.95, "{acc}");
    }
}
