//! Parameter counts, the 20-tokens-per-parameter rule and cloud cost.

use serde::{Deserialize, Serialize};

use crate::mlm::EncoderConfig;

pub const TOKENS_PER_PARAM: u64 = 20;
pub const DEFAULT_BATCH_TOKENS: u64 = 500_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("no candidate shapes")]
    NoCandidates,
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: u64,
    pub hidden: u64,
    pub vocab_size: u64,
    pub max_positions: u64,
    pub head_tied: bool,
}

impl ModelShape {
    pub fn new(n_layers: u64, hidden: u64, vocab_size: u64, max_positions: u64) -> Self {
        ModelShape {
            n_layers,
            hidden,
            vocab_size,
            max_positions,
            head_tied: true,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.hidden == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(PlanError::Shape(
                "hidden, vocab_size and max_positions must be positive".into(),
            ));
        }
        if self.hidden % 2 != 0 {
            return Err(PlanError::Shape(format!("hidden {} is odd", self.hidden)));
        }
        Ok(())
    }

    /// Encoder configuration with the same tensor shapes.
    pub fn encoder_config(&self, n_heads: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            max_positions: self.max_positions as usize,
            seed,
            tie_head: self.head_tied,
            ..EncoderConfig::new(
                self.n_layers as usize,
                self.hidden as usize,
                n_heads,
                self.vocab_size as usize,
            )
        }
    }
}

/// Closed-form parameter count of the pre-norm encoder.
pub fn estimate_params(shape: &ModelShape) -> u64 {
    let ModelShape {
        n_layers: l,
        hidden: d,
        vocab_size: v,
        max_positions: p,
        head_tied,
    } = *shape;
    let per_layer = 12 * d * d + 13 * d;
    let head = if head_tied { 0 } else { d * v + v };
    l * per_layer + (v + p) * d + 2 * d + head
}

pub fn min_tokens(params: u64) -> u64 {
    TOKENS_PER_PARAM * params
}

/// Whole dollars, rounded up: `⌈hours · rate / perf_ratio⌉`.
pub fn estimate_cost(gpu_hours: f64, rate_per_hour: f64, perf_ratio: f64) -> u64 {
    let raw = gpu_hours * rate_per_hour / perf_ratio;
    // absorb representation error so exact quotients stay exact
    let snapped = raw.round();
    if (raw - snapped).abs() <= 1e-9 * raw.abs().max(1.0) {
        snapped as u64
    } else {
        raw.ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub shape: ModelShape,
    /// Training throughput in tokens per GPU hour.
    pub tokens_per_hour: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub rate_per_hour: f64,
    pub perf_ratio: f64,
    pub batch_tokens: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            rate_per_hour: 1.0,
            perf_ratio: 1.8,
            batch_tokens: DEFAULT_BATCH_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub shape: ModelShape,
    pub params: u64,
    pub min_tokens: u64,
    pub tokens_per_hour: f64,
    /// Whole budget spent on this shape.
    pub gpu_hours: f64,
    pub achievable_tokens: u64,
    /// GPU hours needed to reach `min_tokens`.
    pub hours_to_min_tokens: f64,
    pub dollars: u64,
    pub steps_for_budget: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BudgetOutcome {
    Feasible(TrainPlan),
    NoneFeasible { budget_gpu_hours: f64 },
}

/// Picks the largest-parameter candidate that can see `min_tokens` within
/// the budget. Ties go to the earlier candidate.
pub fn plan_budget(
    budget_gpu_hours: f64,
    candidates: &[Candidate],
    cost: &CostModel,
) -> Result<BudgetOutcome, PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    if !(budget_gpu_hours >= 0.0) || !budget_gpu_hours.is_finite() {
        return Err(PlanError::Argument(format!("budget {budget_gpu_hours}")));
    }
    if cost.batch_tokens == 0 || !(cost.perf_ratio > 0.0) || !(cost.rate_per_hour >= 0.0) {
        return Err(PlanError::Argument(
            "cost model needs positive batch, ratio and non-negative rate".into(),
        ));
    }
    let mut best: Option<TrainPlan> = None;
    for c in candidates {
        c.shape.validate()?;
        if !(c.tokens_per_hour > 0.0 && c.tokens_per_hour.is_finite()) {
            return Err(PlanError::Argument(format!(
                "throughput {}",
                c.tokens_per_hour
            )));
        }
        let params = estimate_params(&c.shape);
        let need = min_tokens(params);
        let achievable = (budget_gpu_hours * c.tokens_per_hour).floor() as u64;
        if need > achievable {
            continue;
        }
        if best.as_ref().is_some_and(|b| b.params >= params) {
            continue;
        }
        best = Some(TrainPlan {
            shape: c.shape,
            params,
            min_tokens: need,
            tokens_per_hour: c.tokens_per_hour,
            gpu_hours: budget_gpu_hours,
            achievable_tokens: achievable,
            hours_to_min_tokens: need as f64 / c.tokens_per_hour,
            dollars: estimate_cost(budget_gpu_hours, cost.rate_per_hour, cost.perf_ratio),
            steps_for_budget: achievable / cost.batch_tokens,
        });
    }
    Ok(match best {
        Some(p) => BudgetOutcome::Feasible(p),
        None => BudgetOutcome::NoneFeasible { budget_gpu_hours },
    })
}
