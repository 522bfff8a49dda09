use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
    Momentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Steps of linear warmup from zero to `lr`; constant afterwards.
    pub warmup_steps: usize,
    /// Global L2 gradient norm clip.
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    pub fn momentum(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum { momentum: 0.9 },
            lr,
            warmup_steps: 0,
            grad_clip: Some(1.0),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            warmup_steps: 0,
            grad_clip: Some(1.0),
        }
    }

    pub fn with_warmup(self, warmup_steps: usize) -> Self {
        OptimizerConfig {
            warmup_steps,
            ..self
        }
    }

    /// Learning rate applied at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. `params[i]` and `grads[i]` must have equal
    /// lengths on every call.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.v = self.m.clone();
            }
        }
        let lr = T::lit(self.config.lr_at(self.step));
        self.step += 1;
        let clip = match self.config.grad_clip {
            Some(max) => {
                let norm = grads.iter().flatten().map(|&g| g * g).sum::<T>().sqrt();
                let max = T::lit(max);
                if norm > max {
                    max / norm
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        match self.config.kind {
            OptimizerKind::Momentum { momentum } => {
                let mu = T::lit(momentum);
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((x, &gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = mu * *mi + gi * clip;
                        *x -= lr * *mi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for (((x, &gi), mi), vi) in
                        p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let gi = gi * clip;
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let c = OptimizerConfig::momentum(1.0).with_warmup(4);
        let lrs: Vec<f64> = (0..6).map(|s| c.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn momentum_minimizes_quadratic() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig {
            grad_clip: None,
            ..OptimizerConfig::momentum(0.05)
        });
        let mut x = vec![5.0, -3.0];
        for _ in 0..500 {
            let g = vec![x.iter().map(|v| 2.0 * v).collect::<Vec<f64>>()];
            opt.step(&mut [&mut x[..]], &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut opt = Optimizer::<f32>::new(OptimizerConfig::adam(0.0));
        let mut x = vec![1.0f32, 2.0];
        opt.step(&mut [&mut x[..]], &[vec![3.0, 4.0]]);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
