//! Class-weighted evaluation metrics for imbalanced classification.
//!
//! With per-class true positives `TP_i`, actual positives `AP_i` and weights
//! `w_i`:
//!
//! * weighted accuracy `= Σ w_i·Acc_i / Σ w_i` over classes with `AP_i > 0`,
//!   where `Acc_i = TP_i / AP_i`
//! * weighted recall `= Σ w_i·TP_i / Σ w_i·AP_i`
//! * weighted F1 `= Σ w_i·F1_i·AP_i / Σ w_i·AP_i`
//!
//! Inverse-frequency weights are normalized to sum to one. The unnormalized
//! accuracy `Σ (n/n_i)·Acc_i` is available as
//! [`unnormalized_weighted_accuracy`].

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("length mismatch: {0} true labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("class {0} has zero instances; inverse-frequency weight undefined")]
    EmptyClass(usize),
    #[error("no class has any instances; metric undefined")]
    NoInstances,
    #[error("{got} weights supplied for {n_classes} classes")]
    WeightCount { got: usize, n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionStats {
    pub n_classes: usize,
    pub true_positives: Vec<u64>,
    pub actual_positives: Vec<u64>,
    pub predicted_positives: Vec<u64>,
    pub total: u64,
}

pub fn confusion(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<ConfusionStats, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut s = ConfusionStats {
        n_classes,
        true_positives: vec![0; n_classes],
        actual_positives: vec![0; n_classes],
        predicted_positives: vec![0; n_classes],
        total: y_true.len() as u64,
    };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= n_classes {
                return Err(MetricsError::LabelOutOfRange { label, n_classes });
            }
        }
        s.actual_positives[t] += 1;
        s.predicted_positives[p] += 1;
        if t == p {
            s.true_positives[t] += 1;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_i ∝ n / n_i`
    InverseFrequency,
    /// `w_i = 1 / N`
    Balanced,
    /// `w_i ∝ n_i / n`: every instance counts once. Weighted accuracy and
    /// recall reduce to micro accuracy, weighted F1 to support-weighted F1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights<T> {
    pub weights: Vec<T>,
    pub mode: WeightMode,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn uniform_for(n_classes: usize) -> Self {
        let w = T::one() / T::lit(n_classes as f64);
        ClassWeights {
            weights: vec![w; n_classes],
            mode: WeightMode::Balanced,
        }
    }

    /// Multipliers for the formulas that already scale by `AP_i` (recall,
    /// F1). Under `Uniform` every instance counts once, so these are all one.
    fn ap_scaled(&self) -> Vec<T> {
        match self.mode {
            WeightMode::Uniform => vec![T::one(); self.weights.len()],
            _ => self.weights.clone(),
        }
    }

    fn check(&self, n_classes: usize) -> Result<(), MetricsError> {
        if self.weights.len() != n_classes {
            return Err(MetricsError::WeightCount {
                got: self.weights.len(),
                n_classes,
            });
        }
        Ok(())
    }
}

/// Class weights from per-class instance counts, normalized to sum to one.
pub fn class_weights<T: Scalar>(
    counts: &[u64],
    mode: WeightMode,
) -> Result<ClassWeights<T>, MetricsError> {
    let n: u64 = counts.iter().sum();
    if n == 0 && mode != WeightMode::Balanced {
        return Err(MetricsError::NoInstances);
    }
    let raw: Vec<T> = match mode {
        WeightMode::InverseFrequency => {
            if let Some(i) = counts.iter().position(|&c| c == 0) {
                return Err(MetricsError::EmptyClass(i));
            }
            counts
                .iter()
                .map(|&c| T::lit(n as f64) / T::lit(c as f64))
                .collect()
        }
        WeightMode::Balanced => vec![T::one(); counts.len()],
        WeightMode::Uniform => counts
            .iter()
            .map(|&c| T::lit(c as f64) / T::lit(n as f64))
            .collect(),
    };
    let sum: T = raw.iter().copied().sum();
    Ok(ClassWeights {
        weights: raw.into_iter().map(|w| w / sum).collect(),
        mode,
    })
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    T::lit(num as f64) / T::lit(den as f64)
}

pub fn weighted_accuracy<T: Scalar>(
    stats: &ConfusionStats,
    weights: &ClassWeights<T>,
) -> Result<T, MetricsError> {
    weights.check(stats.n_classes)?;
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..stats.n_classes {
        if stats.actual_positives[i] == 0 {
            continue;
        }
        let acc: T = ratio(stats.true_positives[i], stats.actual_positives[i]);
        num += weights.weights[i] * acc;
        den += weights.weights[i];
    }
    if den == T::zero() {
        return Err(MetricsError::NoInstances);
    }
    Ok(num / den)
}

/// `Σ (n/n_i)·Acc_i` without normalization; may exceed one.
pub fn unnormalized_weighted_accuracy(stats: &ConfusionStats) -> Result<f64, MetricsError> {
    if stats.total == 0 {
        return Err(MetricsError::NoInstances);
    }
    Ok((0..stats.n_classes)
        .filter(|&i| stats.actual_positives[i] > 0)
        .map(|i| {
            let ni = stats.actual_positives[i] as f64;
            (stats.total as f64 / ni) * (stats.true_positives[i] as f64 / ni)
        })
        .sum())
}

pub fn weighted_recall<T: Scalar>(
    stats: &ConfusionStats,
    weights: &ClassWeights<T>,
) -> Result<T, MetricsError> {
    weights.check(stats.n_classes)?;
    let w_all = weights.ap_scaled();
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..stats.n_classes {
        let w = w_all[i];
        num += w * T::lit(stats.true_positives[i] as f64);
        den += w * T::lit(stats.actual_positives[i] as f64);
    }
    if den == T::zero() {
        return Err(MetricsError::NoInstances);
    }
    Ok(num / den)
}

/// Per-class precision, recall and F1 (zero where undefined).
pub fn per_class<T: Scalar>(stats: &ConfusionStats) -> Vec<ClassScores<T>> {
    (0..stats.n_classes)
        .map(|i| {
            let tp = stats.true_positives[i];
            let pp = stats.predicted_positives[i];
            let ap = stats.actual_positives[i];
            let precision = if pp == 0 { T::zero() } else { ratio(tp, pp) };
            let recall = if ap == 0 { T::zero() } else { ratio(tp, ap) };
            let f1 = if pp == 0 || precision + recall == T::zero() {
                T::zero()
            } else {
                T::lit(2.0) * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: ap,
            }
        })
        .collect()
}

pub fn weighted_f1<T: Scalar>(
    stats: &ConfusionStats,
    weights: &ClassWeights<T>,
) -> Result<T, MetricsError> {
    weights.check(stats.n_classes)?;
    let scores = per_class::<T>(stats);
    let w_all = weights.ap_scaled();
    let mut num = T::zero();
    let mut den = T::zero();
    for (i, s) in scores.iter().enumerate() {
        let w_ap = w_all[i] * T::lit(stats.actual_positives[i] as f64);
        num += w_ap * s.f1;
        den += w_ap;
    }
    if den == T::zero() {
        return Err(MetricsError::NoInstances);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub support: u64,
}

/// Everything the `eval` report carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: WeightMode,
    pub weights: Vec<f64>,
    pub per_class: Vec<ClassScores<f64>>,
    pub weighted_accuracy: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unnormalized_weighted_accuracy: Option<f64>,
}

/// Weights are derived from the ground-truth class counts.
pub fn evaluate(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
    mode: WeightMode,
    include_unnormalized: bool,
) -> Result<MetricReport, MetricsError> {
    let stats = confusion(y_true, y_pred, n_classes)?;
    let weights = match mode {
        WeightMode::InverseFrequency => {
            // Classes absent from the ground truth get weight zero.
            let present: Vec<u64> = stats
                .actual_positives
                .iter()
                .copied()
                .filter(|&c| c > 0)
                .collect();
            let w = class_weights::<f64>(&present, mode)?;
            let mut it = w.weights.into_iter();
            let full = stats
                .actual_positives
                .iter()
                .map(|&c| {
                    if c > 0 {
                        it.next().expect("one weight per present class")
                    } else {
                        0.0
                    }
                })
                .collect();
            ClassWeights {
                weights: full,
                mode,
            }
        }
        _ => class_weights::<f64>(&stats.actual_positives, mode)?,
    };
    Ok(MetricReport {
        mode,
        weights: weights.weights.clone(),
        per_class: per_class(&stats),
        weighted_accuracy: weighted_accuracy(&stats, &weights)?,
        weighted_recall: weighted_recall(&stats, &weights)?,
        weighted_f1: weighted_f1(&stats, &weights)?,
        unnormalized_weighted_accuracy: if include_unnormalized {
            Some(unnormalized_weighted_accuracy(&stats)?)
        } else {
            None
        },
    })
}
