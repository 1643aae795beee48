use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, TrainConfig};
use super::{Gradients, LanguageModel, TrainScope};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSeq};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Cross-entropy over the rows in `positions`, where row `j` predicts
/// `targets[j]`. Loss and gradient are divided by `normalizer`.
pub fn token_cross_entropy(
    logits: &Array2<f64>,
    targets: &[TokenId],
    positions: Range<usize>,
    normalizer: f64,
) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for j in positions {
        let z = logits.row(j);
        let max = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut drow = dlogits.row_mut(j);
        let mut sum = 0.0;
        for (d, &v) in drow.iter_mut().zip(z.iter()) {
            *d = (v - max).exp();
            sum += *d;
        }
        let t = targets[j] as usize;
        loss += -(z[t] - max - sum.ln());
        drow.mapv_inplace(|e| e / sum / normalizer);
        drow[t] -= 1.0 / normalizer;
    }
    (loss / normalizer, dlogits)
}

/// Mean next-token cross-entropy of `seq` under `model`.
pub(crate) fn sequence_loss_grad(model: &LanguageModel, seq: &[TokenId], normalizer: f64, grad: &mut Gradients) -> Result<f64> {
    model.accumulate_grad(seq, |logits| Ok(token_cross_entropy(logits, seq, 0..seq.len(), normalizer)), grad)
}

/// Next-token cross-entropy training with Adam. Each step draws
/// `batch_size` sequences from a seeded epoch shuffle; the loss is averaged
/// over all tokens in the batch.
pub fn pretrain(model: &mut LanguageModel, corpus: &[TokenSeq], cfg: &TrainConfig) -> Result<Vec<TrainLogEntry>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let max = model.config().max_seq_len;
    if let Some(s) = corpus.iter().find(|s| s.len() > max) {
        return Err(Error::SequenceTooLong { len: s.len(), max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();
    if order.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let tokens: usize = batch.iter().map(|&i| corpus[i].len()).sum();
        let mut grad = Gradients::zeros(model.param_count());
        let mut loss = 0.0;
        for &i in &batch {
            loss += sequence_loss_grad(model, &corpus[i], tokens as f64, &mut grad)?;
        }
        if !loss.is_finite() {
            log::error!("pretrain diverged at step {step}: loss {loss}");
            return Err(Error::NonFinite { step, what: format!("loss {loss}") });
        }
        let lr = cfg.lr_at(step);
        model.apply_gradient_step(&grad, lr, &mut opt, TrainScope::Full)?;
        log::debug!("step {step} loss {loss:.4} lr {lr:.2e}");
        log.push(TrainLogEntry { step, loss, lr });
    }
    Ok(log)
}

/// Mean per-token loss over a set of sequences (no gradient).
pub fn mean_token_loss(model: &LanguageModel, seqs: &[TokenSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| !s.is_empty()) {
        let d = model.logits(s)?;
        for (j, z) in d.axis_iter(Axis(0)).enumerate() {
            total -= super::log_softmax_at(z, s[j] as usize);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
