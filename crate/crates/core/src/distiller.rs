//! Context distillation: move the base model's definition-conditioned
//! predictions on transfer continuations into a student that never sees the
//! definition.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{softmax_rows, Adam, Gradients, LanguageModel, TrainScope};
use crate::rng;
use crate::sampler::{Continuation, EntityTokens, TransferSet};
use crate::tokenizer::{find_entity_end, TokenSeq};

/// Clamp applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Average over supervised positions (default).
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    RandomDefinition,
    RandomTransfer,
    RandomTransferEntityPrepended,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random_definition" => Ok(Self::RandomDefinition),
            "random_transfer" => Ok(Self::RandomTransfer),
            "random_transfer_entity_prepended" => Ok(Self::RandomTransferEntityPrepended),
            _ => Err(Error::Config(format!("unknown ablation {s:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::RandomDefinition => "random_definition",
            Self::RandomTransfer => "random_transfer",
            Self::RandomTransferEntityPrepended => "random_transfer_entity_prepended",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub learning_rate: f64,
    /// Gradient steps per continuation.
    pub epochs: usize,
    pub temperature: f64,
    pub n_continuations: usize,
    pub scope: TrainScope,
    pub reduction: LossReduction,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            learning_rate: crate::baselines::EditorKind::Distill.default_learning_rate(),
            epochs: 5,
            temperature: 2.0,
            n_continuations: 5,
            scope: TrainScope::Full,
            reduction: LossReduction::Mean,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        crate::lm::check_lr(self.learning_rate)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.n_continuations == 0 {
            return Err(Error::Config("n_continuations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub entity_id: String,
    pub continuation: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedContinuation {
    pub entity_id: String,
    pub continuation: usize,
    pub ell: usize,
    pub len: usize,
}

/// Everything needed to audit one edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub entity_ids: Vec<String>,
    pub config: EditConfig,
    pub base_checksum: String,
    pub student_checksum: String,
    pub losses: Vec<StepLoss>,
    pub skipped: Vec<SkippedContinuation>,
    pub wall_time_s: f64,
}

/// Row-wise softmax of `z / tau`.
pub fn soften(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `KL(p || q) = sum p log(p / q)` with the log arguments floored.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.max(LOG_FLOOR).ln() - b.max(LOG_FLOOR).ln()))
        .sum())
}

/// Mean (or summed) KL between teacher and student over the continuation
/// tokens after the mention. `teacher` holds distributions over `d ⧺ c`
/// (row `i` predicts token `i` of that sequence), `student` over `c` alone;
/// token `j` of `c` is row `def_len + j` of the teacher and row `j` of the
/// student. Both are expected to be temperature-softened already.
pub fn distill_loss(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    ell: usize,
    def_len: usize,
    reduction: LossReduction,
) -> Result<f64> {
    let len = student.nrows();
    if ell >= len {
        return Err(Error::SkipContinuation { ell, len });
    }
    if teacher.nrows() != def_len + len {
        return Err(Error::ShapeMismatch(teacher.nrows(), def_len + len));
    }
    let mut total = 0.0;
    for j in ell..len {
        let t = teacher.row(def_len + j);
        let s = student.row(j);
        total += kl_div(t.as_slice().expect("contiguous"), s.as_slice().expect("contiguous"))?;
    }
    Ok(match reduction {
        LossReduction::Mean => total / (len - ell) as f64,
        LossReduction::Sum => total,
    })
}

/// Cached teacher targets for one continuation: softened distributions for
/// the supervised rows only.
struct Target {
    entity: usize,
    index: usize,
    tokens: TokenSeq,
    ell: usize,
    probs: Array2<f64>,
}

fn teacher_targets(
    base: &LanguageModel,
    entity_idx: usize,
    definition: &[u32],
    set: &TransferSet,
    tau: f64,
    skipped: &mut Vec<SkippedContinuation>,
) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for (i, c) in set.continuations.iter().enumerate() {
        if c.ell >= c.tokens.len() {
            log::warn!("{}: continuation {i} has no tokens after the mention; skipped", set.entity_id);
            skipped.push(SkippedContinuation { entity_id: set.entity_id.clone(), continuation: i, ell: c.ell, len: c.tokens.len() });
            continue;
        }
        let logits = base.logits(&TokenSeq::from(definition).concat(&c.tokens))?;
        let rows = logits.slice(ndarray::s![definition.len() + c.ell.., ..]).to_owned();
        out.push(Target { entity: entity_idx, index: i, tokens: c.tokens.clone(), ell: c.ell, probs: softmax_rows(&rows, tau) });
    }
    Ok(out)
}

/// Loss and logit gradient of the student on one continuation:
/// `d/dz_s KL(p_t || softmax(z_s / tau)) = (p_s - p_t) / tau` per row.
fn student_head(
    logits: &Array2<f64>,
    target: &Target,
    tau: f64,
    reduction: LossReduction,
) -> Result<(f64, Array2<f64>)> {
    let m = target.probs.nrows();
    let norm = match reduction {
        LossReduction::Mean => m as f64,
        LossReduction::Sum => 1.0,
    };
    let rows = logits.slice(ndarray::s![target.ell.., ..]).to_owned();
    let ps = softmax_rows(&rows, tau);
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for k in 0..m {
        let t = target.probs.row(k);
        let s = ps.row(k);
        loss += kl_div(t.as_slice().expect("contiguous"), s.as_slice().expect("contiguous"))?;
        let mut d = dlogits.row_mut(target.ell + k);
        for v in 0..d.len() {
            d[v] = (s[v] - t[v]) / (tau * norm);
        }
    }
    Ok((loss / norm, dlogits))
}

/// Distillation loss of `student` on one continuation and its parameter
/// gradient; the teacher is `base` with `definition` in context.
pub fn continuation_loss_and_grad(
    base: &LanguageModel,
    student: &LanguageModel,
    definition: &[u32],
    continuation: &Continuation,
    tau: f64,
    reduction: LossReduction,
) -> Result<(f64, Gradients)> {
    if continuation.ell >= continuation.tokens.len() {
        return Err(Error::SkipContinuation { ell: continuation.ell, len: continuation.tokens.len() });
    }
    let set = TransferSet { entity_id: String::new(), continuations: vec![continuation.clone()] };
    let target = teacher_targets(base, 0, definition, &set, tau, &mut Vec::new())?.remove(0);
    student.loss_and_grad(&target.tokens, |z| student_head(z, &target, tau, reduction))
}

fn run_distillation(
    base: &LanguageModel,
    student: &mut LanguageModel,
    items: &[(EntityTokens, TransferSet)],
    cfg: &EditConfig,
    shuffle: bool,
) -> Result<EditRecord> {
    cfg.validate()?;
    if base.config() != student.config() {
        return Err(Error::InvalidArgument("base and student architectures differ".into()));
    }
    let start = Instant::now();
    let base_checksum = base.checksum();
    let mut skipped = Vec::new();
    let mut targets = Vec::new();
    for (k, (entity, set)) in items.iter().enumerate() {
        targets.extend(teacher_targets(base, k, &entity.definition, set, cfg.temperature, &mut skipped)?);
    }
    if targets.is_empty() {
        return Err(Error::EditFailed("no continuation has tokens after the entity mention".into()));
    }
    if shuffle {
        targets.shuffle(&mut rng::stream(cfg.seed, "edit-shuffle"));
    }
    let mut optimizer = Adam::new();
    let mut losses = Vec::with_capacity(targets.len() * cfg.epochs);
    let mut step = 0;
    for target in &targets {
        for epoch in 0..cfg.epochs {
            let (loss, grad): (f64, Gradients) =
                student.loss_and_grad(&target.tokens, |z| student_head(z, target, cfg.temperature, cfg.reduction))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, what: "distillation loss".into() });
            }
            student.apply_gradient_step(&grad, cfg.learning_rate, &mut optimizer, cfg.scope)?;
            losses.push(StepLoss {
                step,
                entity_id: items[target.entity].1.entity_id.clone(),
                continuation: target.index,
                epoch,
                loss,
            });
            step += 1;
        }
    }
    Ok(EditRecord {
        entity_ids: items.iter().map(|(_, s)| s.entity_id.clone()).collect(),
        config: cfg.clone(),
        base_checksum,
        student_checksum: student.checksum(),
        losses,
        skipped,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Distills one entity's definition into `student`. Teacher distributions
/// come from the frozen `base` and are computed once per continuation.
pub fn distill_entity(
    base: &LanguageModel,
    student: &mut LanguageModel,
    entity: &EntityTokens,
    set: &TransferSet,
    cfg: &EditConfig,
) -> Result<EditRecord> {
    if set.entity_id != entity.id {
        return Err(Error::InvalidArgument(format!("transfer set for {} given with entity {}", set.entity_id, entity.id)));
    }
    run_distillation(base, student, &[(entity.clone(), set.clone())], cfg, false)
}

/// Distills many entities into one student, visiting the union of
/// (entity, continuation) pairs in a seeded shuffled order.
pub fn distill_batch(
    base: &LanguageModel,
    student: &mut LanguageModel,
    items: &[(EntityTokens, TransferSet)],
    cfg: &EditConfig,
) -> Result<EditRecord> {
    if items.is_empty() {
        return Err(Error::EmptyInput("entities to edit"));
    }
    run_distillation(base, student, items, cfg, true)
}

/// Rewires definitions or transfer sets for the ablation study. Entities
/// keep their order; sampling uses the `ablation` stream of `seed`.
pub fn apply_ablation(
    items: &[(EntityTokens, TransferSet)],
    mode: Ablation,
    seed: u64,
) -> Result<Vec<(EntityTokens, TransferSet)>> {
    if mode == Ablation::None {
        return Ok(items.to_vec());
    }
    if items.len() < 2 {
        return Err(Error::InsufficientPool { need: 2, have: items.len() });
    }
    let mut rng = rng::stream(seed, &format!("ablation-{mode}"));
    let n = items.len();
    match mode {
        Ablation::None => unreachable!(),
        Ablation::RandomDefinition => {
            let perm = derangement(n, &mut rng);
            Ok(items
                .iter()
                .enumerate()
                .map(|(i, (e, t))| (EntityTokens { definition: items[perm[i]].0.definition.clone(), ..e.clone() }, t.clone()))
                .collect())
        }
        Ablation::RandomTransfer | Ablation::RandomTransferEntityPrepended => {
            let mut out = Vec::with_capacity(n);
            for (i, (e, t)) in items.iter().enumerate() {
                let mut donors: Vec<usize> = (0..n).filter(|&j| j != i && !items[j].1.continuations.is_empty()).collect();
                if donors.is_empty() {
                    return Err(Error::InsufficientPool { need: 1, have: 0 });
                }
                donors.shuffle(&mut rng);
                let k = t.continuations.len();
                let continuations = (0..k)
                    .map(|m| {
                        let pool = &items[donors[m % donors.len()]].1.continuations;
                        let c = &pool[rng.random_range(0..pool.len())];
                        if mode == Ablation::RandomTransfer {
                            c.clone()
                        } else {
                            let tokens = e.name.concat(&c.tokens);
                            let ell = find_entity_end(&tokens, &e.name).expect("name is prepended");
                            Continuation { tokens, ell, mention_prepended: true }
                        }
                    })
                    .collect();
                out.push((e.clone(), TransferSet { entity_id: t.entity_id.clone(), continuations }));
            }
            Ok(out)
        }
    }
}

/// Uniform random permutation without fixed points (rejection sampling).
fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}
