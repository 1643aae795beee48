use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer over the flat parameter vector. Only indices inside `ranges`
/// are updated.
pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ranges: &[Range<usize>]);

    /// Number of steps taken so far.
    fn steps(&self) -> usize;
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    t: usize,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ranges: &[Range<usize>]) {
        self.t += 1;
        for r in ranges {
            for i in r.clone() {
                params[i] -= lr * grad[i];
            }
        }
    }

    fn steps(&self) -> usize {
        self.t
    }
}

/// Adam with bias correction; moments are allocated lazily.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ranges: &[Range<usize>]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for r in ranges {
            for i in r.clone() {
                let g = grad[i];
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                params[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn steps(&self) -> usize {
        self.t
    }
}

/// Settings for next-token pretraining and fine-tuning loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear warmup steps, then cosine decay to 10% of `learning_rate`.
    #[serde(default)]
    pub warmup: usize,
}

impl TrainConfig {
    pub const MIN_LR: f64 = 1e-8;
    pub const MAX_LR: f64 = 1e-3;

    pub fn validate(&self) -> Result<()> {
        check_lr(self.learning_rate)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.learning_rate * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let frac = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.learning_rate * (0.1 + 0.9 * cos)
    }
}

/// Learning rates outside `[1e-8, 1e-3]` are rejected.
pub fn check_lr(lr: f64) -> Result<()> {
    if !(TrainConfig::MIN_LR..=TrainConfig::MAX_LR).contains(&lr) {
        return Err(Error::Config(format!(
            "learning rate {lr} outside [{}, {}]",
            TrainConfig::MIN_LR,
            TrainConfig::MAX_LR
        )));
    }
    Ok(())
}
