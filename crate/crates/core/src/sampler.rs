//! Transfer-set generation: nucleus-sampled continuations of a definition,
//! each guaranteed to mention the entity.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::rng::{self, StreamRng};
use crate::tokenizer::{find_entity_end, find_subsequence, TokenId, TokenSeq, Vocabulary};

/// Tolerance for the normalization check on sampling distributions.
pub const NORM_TOL: f64 = 1e-6;
const DUPLICATE_RETRIES: usize = 3;
const MIN_SUPERVISED: usize = 3;

/// An entity as the editing pipeline sees it: name and definition tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityTokens {
    pub id: String,
    pub name: TokenSeq,
    pub definition: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub prompt: TokenSeq,
    pub nucleus_p: f64,
    pub max_new_tokens: usize,
    pub n_continuations: usize,
    pub seed: u64,
}

impl GenerationSpec {
    pub const DEFAULT_P: f64 = 0.9;
    pub const DEFAULT_MAX_NEW: usize = 40;
    pub const DEFAULT_N: usize = 5;

    pub fn new(prompt: TokenSeq, seed: u64) -> Self {
        Self {
            prompt,
            nucleus_p: Self::DEFAULT_P,
            max_new_tokens: Self::DEFAULT_MAX_NEW,
            n_continuations: Self::DEFAULT_N,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("nucleus_p {} not in (0, 1]", self.nucleus_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Continuation {
    pub tokens: TokenSeq,
    /// 1-based index of the last token of the first entity mention.
    pub ell: usize,
    pub mention_prepended: bool,
}

impl Continuation {
    /// Tokens after the mention, `ell+1..=len`.
    pub fn supervised(&self) -> usize {
        self.tokens.len().saturating_sub(self.ell)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSet {
    pub entity_id: String,
    pub continuations: Vec<Continuation>,
}

/// One line of a transfer-set JSON-lines file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLine {
    pub entity_id: String,
    pub text: String,
    pub ell: usize,
    pub mention_prepended: bool,
}

impl TransferSet {
    pub fn to_lines(&self, v: &Vocabulary) -> Vec<TransferLine> {
        self.continuations
            .iter()
            .map(|c| TransferLine {
                entity_id: self.entity_id.clone(),
                text: v.decode(&c.tokens),
                ell: c.ell,
                mention_prepended: c.mention_prepended,
            })
            .collect()
    }

    pub fn to_jsonl(&self, v: &Vocabulary) -> Result<String> {
        let mut s = String::new();
        for l in self.to_lines(v) {
            s.push_str(&serde_json::to_string(&l)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Groups lines by entity, preserving first-seen order.
    pub fn from_jsonl(text: &str, v: &Vocabulary) -> Result<Vec<TransferSet>> {
        let mut out: Vec<TransferSet> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: TransferLine = serde_json::from_str(line)?;
            let c = Continuation { tokens: v.encode(&l.text), ell: l.ell, mention_prepended: l.mention_prepended };
            match out.iter_mut().find(|t| t.entity_id == l.entity_id) {
                Some(t) => t.continuations.push(c),
                None => out.push(TransferSet { entity_id: l.entity_id, continuations: vec![c] }),
            }
        }
        Ok(out)
    }
}

/// Minimal set of highest-probability tokens with cumulative mass `>= p`,
/// renormalized. Ties in probability go to the lower token id first.
pub fn nucleus_support(dist: &[f64], p: f64) -> Result<Vec<(TokenId, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("nucleus p {p} not in (0, 1]")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL || dist.iter().any(|&q| !(q >= 0.0)) {
        return Err(Error::Unnormalized(sum));
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut support = Vec::new();
    let mut mass = 0.0;
    for i in order {
        support.push((i as TokenId, dist[i]));
        mass += dist[i];
        // absorb float drift in the running sum
        if mass >= p - 1e-12 {
            break;
        }
    }
    Ok(support.into_iter().map(|(t, q)| (t, q / mass)).collect())
}

pub fn nucleus_sample_step(dist: &[f64], p: f64, rng: &mut StreamRng) -> Result<TokenId> {
    let support = nucleus_support(dist, p)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, q) in &support {
        acc += q;
        if u < acc {
            return Ok(t);
        }
    }
    Ok(support.last().expect("support is nonempty").0)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Samples up to `max_new_tokens` after `prompt ⧺ definition`, stopping at
/// `<eos>` (not included).
pub fn generate_continuation(
    generator: &LanguageModel,
    definition: &[TokenId],
    spec: &GenerationSpec,
    rng: &mut StreamRng,
) -> Result<TokenSeq> {
    spec.validate()?;
    let ctx_len = spec.prompt.len() + definition.len() + spec.max_new_tokens;
    let max = generator.config().max_seq_len;
    if ctx_len > max {
        return Err(Error::SequenceTooLong { len: ctx_len, max });
    }
    let mut context: Vec<TokenId> = spec.prompt.iter().chain(definition.iter()).copied().collect();
    let start = context.len();
    for _ in 0..spec.max_new_tokens {
        let logits = generator.next_token_logits(&context)?;
        let probs = softmax(logits.as_slice().expect("contiguous"));
        let t = nucleus_sample_step(&probs, spec.nucleus_p, rng)?;
        if t == Vocabulary::EOS_ID {
            break;
        }
        context.push(t);
    }
    Ok(TokenSeq::from(&context[start..]))
}

/// Keeps `c` when it mentions `entity`, otherwise prepends the name.
pub fn ensure_entity_mention(c: &[TokenId], entity: &[TokenId]) -> Continuation {
    match find_entity_end(c, entity) {
        Ok(ell) => Continuation { tokens: TokenSeq::from(c), ell, mention_prepended: false },
        Err(_) => Continuation {
            tokens: TokenSeq::from(entity).concat(c),
            ell: entity.len(),
            mention_prepended: true,
        },
    }
}

/// `N` continuations for one entity from the generator. Duplicates are
/// resampled up to three times and then kept; continuations with fewer than
/// three tokens after the mention are resampled once.
pub fn build_transfer_set(generator: &LanguageModel, entity: &EntityTokens, spec: &GenerationSpec) -> Result<TransferSet> {
    let mut rng = rng::substream(spec.seed, "generation", &entity.id);
    let mut seen: HashSet<TokenSeq> = HashSet::new();
    let mut continuations = Vec::with_capacity(spec.n_continuations);
    for i in 0..spec.n_continuations {
        let mut dup_retries = 0;
        let mut short_retried = false;
        let c = loop {
            let raw = generate_continuation(generator, &entity.definition, spec, &mut rng)?;
            let c = ensure_entity_mention(&raw, &entity.name);
            if c.supervised() < MIN_SUPERVISED && !short_retried {
                short_retried = true;
                continue;
            }
            if seen.contains(&c.tokens) {
                if dup_retries < DUPLICATE_RETRIES {
                    dup_retries += 1;
                    continue;
                }
                log::warn!("entity {}: continuation {i} duplicates an earlier one; keeping it", entity.id);
            }
            break c;
        };
        seen.insert(c.tokens.clone());
        continuations.push(c);
    }
    Ok(TransferSet { entity_id: entity.id.clone(), continuations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    pub mean_tokens: f64,
    /// Percentage of continuation tokens whose string occurs in the definition.
    pub pct_in_definition: f64,
    pub mean_tokens_after_ell: f64,
}

pub fn transfer_stats(set: &TransferSet, definition: &[TokenId]) -> Result<TransferStats> {
    if set.continuations.is_empty() {
        return Err(Error::EmptyInput("transfer set"));
    }
    let def: HashSet<TokenId> = definition.iter().copied().collect();
    let n = set.continuations.len() as f64;
    let total: usize = set.continuations.iter().map(|c| c.tokens.len()).sum();
    let in_def: usize = set.continuations.iter().flat_map(|c| c.tokens.iter()).filter(|t| def.contains(t)).count();
    let after: usize = set.continuations.iter().map(Continuation::supervised).sum();
    Ok(TransferStats {
        mean_tokens: total as f64 / n,
        pct_in_definition: if total == 0 { 0.0 } else { 100.0 * in_def as f64 / total as f64 },
        mean_tokens_after_ell: after as f64 / n,
    })
}

/// True when `entity` occurs contiguously in `c`.
pub fn mentions(c: &[TokenId], entity: &[TokenId]) -> bool {
    find_subsequence(c, entity).is_some()
}
