//! Comparison editors: fine-tuning on the definition or on the transfer set,
//! evaluation-time prepending, and a placeholder for external editors.

use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::distiller::EditConfig;
use crate::error::{Error, Result};
use crate::evalsuite::option_scores;
use crate::lm::{self, token_cross_entropy, Adam, LanguageModel, TrainScope};
use crate::rng;
use crate::sampler::{EntityTokens, TransferSet};
use crate::tokenizer::{TokenId, TokenSeq};
use crate::world::ProbeExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    FtDefinitionFull,
    FtDefinitionLastLayer,
    FtTransfer,
    Distill,
    Prepend,
    PrependRandom,
    External,
}

impl EditorKind {
    pub const ALL: [EditorKind; 7] = [
        Self::FtDefinitionFull,
        Self::FtDefinitionLastLayer,
        Self::FtTransfer,
        Self::Distill,
        Self::Prepend,
        Self::PrependRandom,
        Self::External,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FtDefinitionFull => "ft_definition_full",
            Self::FtDefinitionLastLayer => "ft_definition_last_layer",
            Self::FtTransfer => "ft_transfer",
            Self::Distill => "distill",
            Self::Prepend => "prepend",
            Self::PrependRandom => "prepend_random",
            Self::External => "external",
        }
    }

    /// Parameters this editor may change; `None` for evaluation-only kinds.
    pub fn scope(self) -> Option<TrainScope> {
        match self {
            Self::FtDefinitionLastLayer => Some(TrainScope::LastLayer),
            Self::FtDefinitionFull | Self::FtTransfer | Self::Distill => Some(TrainScope::Full),
            Self::Prepend | Self::PrependRandom | Self::External => None,
        }
    }

    /// Learning rate for the default toy model: the largest value on a
    /// coarse grid whose specificity drift stays within 5% on a tuning seed
    /// disjoint from the evaluation seeds.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::FtDefinitionFull => 3e-5,
            Self::FtDefinitionLastLayer => 1e-4,
            Self::FtTransfer => 5e-5,
            Self::Distill => 1.5e-5,
            Self::Prepend | Self::PrependRandom | Self::External => 0.0,
        }
    }
}

impl std::fmt::Display for EditorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EditorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown editor {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorSpec {
    pub kind: EditorKind,
    pub config: EditConfig,
}

impl EditorSpec {
    /// Shared config with the kind's learning rate and scope filled in.
    pub fn new(kind: EditorKind, mut config: EditConfig) -> Self {
        if kind.default_learning_rate() > 0.0 {
            config.learning_rate = kind.default_learning_rate();
        }
        if let Some(scope) = kind.scope() {
            config.scope = scope;
        }
        Self { kind, config }
    }
}

/// Per-step training loss of a fine-tuning baseline.
pub type LossTrace = Vec<f64>;

/// Teacher-forced cross-entropy on `d`'s tokens 2..|d| for `steps` Adam
/// steps.
pub fn finetune_definition(
    model: &mut LanguageModel,
    definition: &[TokenId],
    learning_rate: f64,
    steps: usize,
    scope: TrainScope,
) -> Result<LossTrace> {
    if definition.len() < 2 {
        return Err(Error::InvalidArgument("definition needs at least two tokens".into()));
    }
    lm::check_lr(learning_rate)?;
    let mut opt = Adam::new();
    let n = (definition.len() - 1) as f64;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) =
            model.loss_and_grad(definition, |z| Ok(token_cross_entropy(z, definition, 1..definition.len(), n)))?;
        check_loss(loss, step)?;
        model.apply_gradient_step(&grad, learning_rate, &mut opt, scope)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Definition fine-tuning of many entities into one model: `steps` rounds,
/// each visiting every definition once in a seeded shuffled order, one
/// Adam step per visit.
pub fn finetune_definitions(
    model: &mut LanguageModel,
    definitions: &[&[TokenId]],
    learning_rate: f64,
    steps: usize,
    scope: TrainScope,
    seed: u64,
) -> Result<LossTrace> {
    if definitions.is_empty() {
        return Err(Error::EmptyInput("definitions"));
    }
    if definitions.iter().any(|d| d.len() < 2) {
        return Err(Error::InvalidArgument("definition needs at least two tokens".into()));
    }
    lm::check_lr(learning_rate)?;
    let mut rng = rng::stream(seed, "edit-shuffle");
    let mut order: Vec<usize> = (0..definitions.len()).collect();
    let mut opt = Adam::new();
    let mut trace = Vec::with_capacity(steps * definitions.len());
    for _ in 0..steps {
        order.shuffle(&mut rng);
        for &i in &order {
            let d = definitions[i];
            let n = (d.len() - 1) as f64;
            let (loss, grad) = model.loss_and_grad(d, |z| Ok(token_cross_entropy(z, d, 1..d.len(), n)))?;
            check_loss(loss, trace.len())?;
            model.apply_gradient_step(&grad, learning_rate, &mut opt, scope)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}

/// Rows of `d ⧺ c` supervised when fine-tuning on a continuation: the
/// tokens after the mention, exactly those distillation supervises.
pub fn transfer_positions(def_len: usize, ell: usize, cont_len: usize) -> std::ops::Range<usize> {
    def_len + ell..def_len + cont_len
}

/// Definition fine-tuning (`cfg.epochs` steps, full model) followed by
/// `cfg.epochs` steps per continuation of cross-entropy on the tokens after
/// the mention, with the definition in context.
pub fn finetune_transfer(
    model: &mut LanguageModel,
    definition: &[TokenId],
    set: &TransferSet,
    cfg: &EditConfig,
) -> Result<LossTrace> {
    cfg.validate()?;
    let mut trace = finetune_definition(model, definition, cfg.learning_rate, cfg.epochs, TrainScope::Full)?;
    let mut opt = Adam::new();
    for c in &set.continuations {
        if c.ell >= c.tokens.len() {
            continue;
        }
        let seq = TokenSeq::from(definition).concat(&c.tokens);
        let rows = transfer_positions(definition.len(), c.ell, c.tokens.len());
        let n = rows.len() as f64;
        for _ in 0..cfg.epochs {
            let (loss, grad) = model.loss_and_grad(&seq, |z| Ok(token_cross_entropy(z, &seq, rows.clone(), n)))?;
            check_loss(loss, trace.len())?;
            model.apply_gradient_step(&grad, cfg.learning_rate, &mut opt, cfg.scope)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: "fine-tuning loss".into() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub ppl: f64,
    pub option_scores: Option<Vec<f64>>,
}

/// Evaluates `probe` with `definition` placed before its prefix.
pub fn prepend_eval(model: &LanguageModel, definition: &[TokenId], probe: &ProbeExample) -> Result<ProbeEval> {
    let context = TokenSeq::from(definition).concat(&probe.prefix);
    let ppl = model.perplexity(&context, &probe.target)?;
    let option_scores = probe.options.as_ref().map(|o| option_scores(model, &context, o)).transpose()?;
    Ok(ProbeEval { ppl, option_scores })
}

/// A definition of some other entity in `pool`, chosen per probe from a
/// seeded stream.
pub fn random_other_definition<'a>(pool: &'a [EntityTokens], entity_id: &str, key: &str, seed: u64) -> Result<&'a EntityTokens> {
    let others: Vec<&EntityTokens> = pool.iter().filter(|e| e.id != entity_id).collect();
    if pool.len() < 2 || others.is_empty() {
        return Err(Error::InsufficientPool { need: 2, have: pool.len() });
    }
    let mut rng = rng::substream(seed, "prepend-random", key);
    Ok(others.choose(&mut rng).expect("nonempty"))
}

pub fn prepend_random_eval(model: &LanguageModel, pool: &[EntityTokens], probe: &ProbeExample, seed: u64) -> Result<ProbeEval> {
    let other = random_other_definition(pool, &probe.entity_id, &probe.id, seed)?;
    prepend_eval(model, &other.definition, probe)
}

/// Stand-in for hypernetwork or rank-one editors, which are out of scope.
/// Their post-edit checkpoints can still be evaluated via
/// [`load_external`].
pub fn external_editor_stub(spec: &EditorSpec) -> Result<LanguageModel> {
    Err(Error::NotImplemented(format!("external editor ({}) must be run outside this crate", spec.kind)))
}

/// Loads a checkpoint produced by an external editor for evaluation.
pub fn load_external(path: &Path) -> Result<LanguageModel> {
    lm::load_checkpoint(path)
}

/// Mean token cross-entropy of `seq` on `rows`, without gradients.
pub fn rows_cross_entropy(model: &LanguageModel, seq: &[TokenId], rows: std::ops::Range<usize>) -> Result<f64> {
    let z: Array2<f64> = model.logits(seq)?;
    let n = rows.len() as f64;
    Ok(token_cross_entropy(&z, seq, rows, n).0)
}
