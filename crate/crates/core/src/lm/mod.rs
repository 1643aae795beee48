//! Decoder-only autoregressive language model.
//!
//! Distribution indexing: for an input `x` of length `n`, `forward` returns
//! `n` distributions where entry `j` (0-based) is the model's prediction of
//! token `x[j]` given `<bos>, x[..j]`. The network therefore runs on
//! `<bos>, x[..n-1]` and never conditions a position on itself or anything
//! after it.

mod checkpoint;
pub mod layout;
mod network;
pub mod optim;
mod train;

use std::fmt;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layout::{Layout, TensorSpec};
pub use optim::{check_lr, Adam, Optimizer, Sgd, TrainConfig};
pub use train::{mean_token_loss, pretrain, token_cross_entropy, TrainLogEntry};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Share the token embedding with the output projection.
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    /// 4 layers, d_model 128, 4 heads, 256 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self { n_layers: 4, d_model: 128, n_heads: 4, max_seq_len: 256, vocab_size, tie_embeddings: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= Vocabulary::UNK_ID as usize {
            return Err(Error::Config("vocab_size must include the special tokens".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Student,
    Teacher,
    Generator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Base => "base",
            Role::Student => "student",
            Role::Teacher => "teacher",
            Role::Generator => "generator",
        };
        f.write_str(s)
    }
}

/// Which parameters an editor may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    #[default]
    Full,
    /// Final transformer block, final norm and output projection.
    LastLayer,
}

/// Per-position probability vectors, with the raw logits retained.
#[derive(Clone, Debug)]
pub struct DistSeq {
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl DistSeq {
    pub fn from_logits(logits: Array2<f64>) -> Self {
        let probs = softmax_rows(&logits, 1.0);
        Self { logits, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distribution predicting token `j` (0-based).
    pub fn dist(&self, j: usize) -> ArrayView1<'_, f64> {
        self.probs.row(j)
    }

    pub fn logit_row(&self, j: usize) -> ArrayView1<'_, f64> {
        self.logits.row(j)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Rows `range` as a new sequence.
    pub fn slice(&self, range: Range<usize>) -> DistSeq {
        DistSeq {
            logits: self.logits.slice(ndarray::s![range.clone(), ..]).to_owned(),
            probs: self.probs.slice(ndarray::s![range, ..]).to_owned(),
        }
    }
}

/// Row-wise `softmax(z / tau)`.
pub fn softmax_rows(z: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = z.clone();
    for mut r in out.axis_iter_mut(Axis(0)) {
        let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        r.mapv_inplace(|v| {
            let e = ((v - max) / tau).exp();
            sum += e;
            e
        });
        r.mapv_inplace(|v| v / sum);
    }
    out
}

/// Parameter-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// A decoder-only language model together with its role tag.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    role: Role,
}

impl LanguageModel {
    /// Random initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2 * n_layers)`, unit LayerNorm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |t: TensorSpec, s: f64, params: &mut [f64]| {
            let dist = Normal::new(0.0, s).expect("positive std");
            for v in &mut params[t.range()] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(layout.tok_emb, std, &mut params);
        fill(layout.pos_emb, std / 2.0, &mut params);
        for b in &layout.blocks {
            fill(b.w_qkv, std, &mut params);
            fill(b.w_o, resid_std, &mut params);
            fill(b.w_fc, std, &mut params);
            fill(b.w_proj, resid_std, &mut params);
            params[b.ln1_g.range()].fill(1.0);
            params[b.ln2_g.range()].fill(1.0);
        }
        params[layout.lnf_g.range()].fill(1.0);
        if let Some(h) = layout.head {
            fill(h, std, &mut params);
        }
        Ok(Self { config, layout, params, role: Role::Base })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>, role: Role) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch(params.len(), layout.total));
        }
        Ok(Self { config, layout, params, role })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Independent copy with the given role.
    pub fn deep_copy(&self, role: Role) -> Self {
        let mut m = self.clone();
        m.role = role;
        m
    }

    /// SHA-256 over the parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Re-draws the embedding rows of tokens that never occurred in training
    /// from a per-dimension normal fitted to observed `reference` rows, the
    /// usual initialization for vocabulary entries added to a trained model.
    /// Applies to the untied output head as well. Returns the number of
    /// re-drawn tokens.
    pub fn initialize_unseen_tokens(&mut self, seen: &[bool], reference: &[bool], seed: u64) -> Result<usize> {
        if seen.len() != self.config.vocab_size {
            return Err(Error::ShapeMismatch(seen.len(), self.config.vocab_size));
        }
        if reference.len() != self.config.vocab_size {
            return Err(Error::ShapeMismatch(reference.len(), self.config.vocab_size));
        }
        let n_seen = seen.iter().filter(|&&s| s).count();
        if (0..seen.len()).filter(|&i| seen[i] && reference[i]).count() < 2 {
            return Err(Error::InvalidArgument("need at least two observed reference tokens to fit embeddings".into()));
        }
        let mut rng = crate::rng::stream(seed, "unseen-embeddings");
        let mut tensors = vec![self.layout.tok_emb];
        tensors.extend(self.layout.head);
        for t in tensors {
            let d = t.cols;
            let mut stats = Vec::with_capacity(d);
            for c in 0..d {
                let col: Vec<f64> =
                    (0..t.rows).filter(|&r| seen[r] && reference[r]).map(|r| self.params[t.offset + r * d + c]).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
                stats.push(Normal::new(mean, var.sqrt().max(1e-12)).expect("finite moments"));
            }
            for r in (0..t.rows).filter(|&r| !seen[r]) {
                for (c, dist) in stats.iter().enumerate() {
                    self.params[t.offset + r * d + c] = dist.sample(&mut rng);
                }
            }
        }
        Ok(seen.len() - n_seen)
    }

    /// Ranges of the flat parameter vector that `scope` may update.
    pub fn trainable_ranges(&self, scope: TrainScope) -> Vec<Range<usize>> {
        match scope {
            TrainScope::Full => vec![0..self.layout.total],
            TrainScope::LastLayer => {
                let last = self.layout.blocks.last().expect("at least one block");
                vec![
                    last.range(),
                    self.layout.lnf_g.range(),
                    self.layout.lnf_b.range(),
                    self.layout.output().range(),
                ]
            }
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: n, max: self.config.max_seq_len });
        }
        Ok(())
    }

    fn network_inputs(x: &[TokenId]) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(x.len());
        inputs.push(Vocabulary::BOS_ID);
        inputs.extend_from_slice(&x[..x.len() - 1]);
        inputs
    }

    fn check_ids(&self, x: &[TokenId]) -> Result<()> {
        if let Some(&bad) = x.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    /// Raw logits `[|x|, vocab]`; row `j` predicts `x[j]`.
    pub fn logits(&self, x: &[TokenId]) -> Result<Array2<f64>> {
        if x.is_empty() {
            return Err(Error::EmptyInput("forward input"));
        }
        self.check_len(x.len())?;
        self.check_ids(x)?;
        let inputs = Self::network_inputs(x);
        Ok(network::forward(&self.config, &self.layout, &self.params, &inputs, false).0)
    }

    pub fn forward(&self, x: &[TokenId]) -> Result<DistSeq> {
        Ok(DistSeq::from_logits(self.logits(x)?))
    }

    /// `forward(prefix ⧺ cont)` restricted to the last `|cont|` positions.
    pub fn conditional_forward(&self, prefix: &[TokenId], cont: &[TokenId]) -> Result<DistSeq> {
        if cont.is_empty() {
            return Err(Error::EmptyInput("continuation"));
        }
        let full: Vec<TokenId> = prefix.iter().chain(cont.iter()).copied().collect();
        let all = self.logits(&full)?;
        let logits = all.slice(ndarray::s![prefix.len().., ..]).to_owned();
        Ok(DistSeq::from_logits(logits))
    }

    /// Logits for the token following `context` (which may be empty).
    pub fn next_token_logits(&self, context: &[TokenId]) -> Result<Array1<f64>> {
        self.check_len(context.len() + 1)?;
        self.check_ids(context)?;
        let mut inputs = Vec::with_capacity(context.len() + 1);
        inputs.push(Vocabulary::BOS_ID);
        inputs.extend_from_slice(context);
        let (logits, _) = network::forward(&self.config, &self.layout, &self.params, &inputs, false);
        Ok(logits.row(logits.nrows() - 1).to_owned())
    }

    /// Per-token natural-log NLL of `y` given `x`.
    pub fn nll(&self, x: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>> {
        if y.is_empty() {
            return Err(Error::EmptyInput("target span"));
        }
        let d = self.conditional_forward(x, y)?;
        Ok(y.iter()
            .enumerate()
            .map(|(k, &t)| -log_softmax_at(d.logit_row(k), t as usize))
            .collect())
    }

    /// `exp(mean nll)`.
    pub fn perplexity(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let nll = self.nll(x, y)?;
        Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
    }

    /// Loss and parameter gradient for a differentiable head over the logits
    /// of `forward(x)`. `head` returns `(loss, dloss/dlogits)`.
    pub fn loss_and_grad<F>(&self, x: &[TokenId], head: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let mut grad = Gradients::zeros(self.params.len());
        let loss = self.accumulate_grad(x, head, &mut grad)?;
        Ok((loss, grad))
    }

    /// As [`loss_and_grad`](Self::loss_and_grad), adding into `grad`.
    pub fn accumulate_grad<F>(&self, x: &[TokenId], head: F, grad: &mut Gradients) -> Result<f64>
    where
        F: FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        if x.is_empty() {
            return Err(Error::EmptyInput("forward input"));
        }
        self.check_len(x.len())?;
        self.check_ids(x)?;
        let inputs = Self::network_inputs(x);
        let (logits, cache) = network::forward(&self.config, &self.layout, &self.params, &inputs, true);
        let (loss, dlogits) = head(&logits)?;
        if dlogits.dim() != logits.dim() {
            return Err(Error::ShapeMismatch(dlogits.len(), logits.len()));
        }
        network::backward(
            &self.config,
            &self.layout,
            &self.params,
            cache.as_ref().expect("cache kept"),
            &dlogits,
            &mut grad.0,
        );
        Ok(loss)
    }

    /// One optimizer step. Non-finite gradients abort before any parameter
    /// is touched.
    pub fn apply_gradient_step(
        &mut self,
        grad: &Gradients,
        lr: f64,
        optimizer: &mut dyn Optimizer,
        scope: TrainScope,
    ) -> Result<()> {
        if grad.0.len() != self.params.len() {
            return Err(Error::ShapeMismatch(grad.0.len(), self.params.len()));
        }
        if let Some(i) = grad.0.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step: optimizer.steps(), what: format!("gradient entry {i}") });
        }
        let ranges = self.trainable_ranges(scope);
        optimizer.step(&mut self.params, &grad.0, lr, &ranges);
        Ok(())
    }
}

pub(crate) fn log_softmax_at(z: ArrayView1<f64>, k: usize) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z[k] - lse
}

#[cfg(test)]
mod tests;
