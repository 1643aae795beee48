//! Measurements: probe perplexity, specificity, multiple-choice accuracy,
//! definition perplexity, per-token NLL reductions and paired bootstrap.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::rng;
use crate::sampler::Continuation;
use crate::tokenizer::{TokenId, TokenSeq, Vocabulary};
use crate::world::ProbeExample;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Context placed before each probe prefix at evaluation time.
#[derive(Clone, Copy, Debug, Default)]
pub enum Prepend<'a> {
    #[default]
    None,
    /// The same tokens before every probe.
    Fixed(&'a [TokenId]),
    /// Tokens looked up by the probe's entity id.
    PerEntity(&'a HashMap<String, TokenSeq>),
}

impl Prepend<'_> {
    fn context(&self, probe: &ProbeExample) -> Result<TokenSeq> {
        Ok(match self {
            Prepend::None => probe.prefix.clone(),
            Prepend::Fixed(d) => TokenSeq::from(*d).concat(&probe.prefix),
            Prepend::PerEntity(map) => map
                .get(&probe.entity_id)
                .ok_or_else(|| Error::UnknownEntity(probe.entity_id.clone()))?
                .concat(&probe.prefix),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub probe_id: String,
    pub entity_id: String,
    pub ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplResult {
    pub mean: f64,
    pub per_probe: Vec<ProbeScore>,
}

impl PplResult {
    pub fn values(&self) -> Vec<f64> {
        self.per_probe.iter().map(|p| p.ppl).collect()
    }

    /// Mean perplexity per entity, in first-seen order.
    pub fn by_entity(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
        for p in &self.per_probe {
            let e = sums.entry(&p.entity_id).or_insert_with(|| {
                order.push(p.entity_id.clone());
                (0.0, 0)
            });
            e.0 += p.ppl;
            e.1 += 1;
        }
        order
            .into_iter()
            .map(|id| {
                let (s, n) = sums[id.as_str()];
                (id, s / n as f64)
            })
            .collect()
    }
}

/// Mean over probes of `PPL(y | context ⧺ x)`.
pub fn eval_target_ppl(model: &LanguageModel, probes: &[ProbeExample], prepend: Prepend) -> Result<PplResult> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe set"));
    }
    let mut per_probe = Vec::with_capacity(probes.len());
    for p in probes {
        let ppl = model.perplexity(&prepend.context(p)?, &p.target)?;
        per_probe.push(ProbeScore { probe_id: p.id.clone(), entity_id: p.entity_id.clone(), ppl });
    }
    let mean = per_probe.iter().map(|p| p.ppl).sum::<f64>() / per_probe.len() as f64;
    Ok(PplResult { mean, per_probe })
}

/// `post - pre`, unrounded.
pub fn compute_delta(pre: f64, post: f64) -> f64 {
    post - pre
}

/// One-decimal display rounding used in reports.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificityResult {
    pub pre: f64,
    pub post: f64,
    pub delta: f64,
    pub relative: f64,
}

/// Perplexity change on probes about entities that were not edited.
pub fn eval_specificity(
    post_model: &LanguageModel,
    spec_probes: &[ProbeExample],
    baseline: &PplResult,
    edited: &[&str],
) -> Result<SpecificityResult> {
    let edited: HashSet<&str> = edited.iter().copied().collect();
    let overlap: Vec<String> = spec_probes
        .iter()
        .filter(|p| edited.contains(p.entity_id.as_str()))
        .map(|p| p.entity_id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::SpecificityOverlap(overlap));
    }
    let ids: Vec<&str> = spec_probes.iter().map(|p| p.id.as_str()).collect();
    let base_ids: Vec<&str> = baseline.per_probe.iter().map(|p| p.probe_id.as_str()).collect();
    if ids != base_ids {
        return Err(Error::InvalidArgument("specificity baseline was computed on a different probe set".into()));
    }
    let post = eval_target_ppl(post_model, spec_probes, Prepend::None)?;
    let delta = compute_delta(baseline.mean, post.mean);
    Ok(SpecificityResult { pre: baseline.mean, post: post.mean, delta, relative: delta / baseline.mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub accuracy: f64,
    pub n: usize,
    /// Probes where the best score was shared by several options.
    pub ties: usize,
    pub predictions: Vec<usize>,
}

/// Length-normalized log-likelihood of each option after `context`.
pub fn option_scores(model: &LanguageModel, context: &[TokenId], options: &[TokenSeq]) -> Result<Vec<f64>> {
    options
        .iter()
        .map(|o| {
            let nll = model.nll(context, o)?;
            Ok(-nll.iter().sum::<f64>() / nll.len() as f64)
        })
        .collect()
}

/// Argmax with ties going to the lowest index; returns `(index, tied)`.
pub fn argmax_lowest(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let tied = scores.iter().enumerate().any(|(i, &s)| i != best && s == scores[best]);
    (best, tied)
}

pub fn eval_accuracy(model: &LanguageModel, probes: &[ProbeExample], prepend: Prepend) -> Result<AccuracyResult> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("probe set"));
    }
    let mut correct = 0;
    let mut ties = 0;
    let mut predictions = Vec::with_capacity(probes.len());
    for p in probes {
        let options = match &p.options {
            Some(o) if o.len() >= 2 => o,
            _ => return Err(Error::InvalidArgument(format!("probe {} lacks at least two options", p.id))),
        };
        let scores = option_scores(model, &prepend.context(p)?, options)?;
        let (pred, tied) = argmax_lowest(&scores);
        correct += usize::from(pred == p.gold);
        ties += usize::from(tied);
        predictions.push(pred);
    }
    Ok(AccuracyResult { accuracy: correct as f64 / probes.len() as f64, n: probes.len(), ties, predictions })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefinitionPpl {
    pub nll: f64,
    pub ppl: f64,
}

/// Per-token perplexity of `d[1..]` given `d[0]`.
pub fn eval_definition_ppl(model: &LanguageModel, definition: &[TokenId]) -> Result<DefinitionPpl> {
    if definition.len() < 2 {
        return Err(Error::InvalidArgument("definition needs at least two tokens".into()));
    }
    let nll = model.nll(&definition[..1], &definition[1..])?;
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(DefinitionPpl { nll: mean, ppl: mean.exp() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReduction {
    pub continuation: usize,
    pub position: usize,
    pub token: TokenId,
    pub in_definition: bool,
    pub nll_unconditioned: f64,
    pub nll_conditioned: f64,
    /// `(unconditioned - conditioned) / unconditioned`; zero when both are zero.
    pub reduction: f64,
}

/// For every token after the mention: NLL without and with the definition
/// in context.
pub fn nll_reduction_analysis(
    model: &LanguageModel,
    definition: &[TokenId],
    continuations: &[Continuation],
) -> Result<Vec<NllReduction>> {
    if continuations.is_empty() {
        return Err(Error::EmptyInput("continuations"));
    }
    let def: HashSet<TokenId> = definition.iter().copied().collect();
    let mut out = Vec::new();
    for (i, c) in continuations.iter().enumerate() {
        if c.ell >= c.tokens.len() {
            continue;
        }
        let unc = model.nll(&[], &c.tokens)?;
        let cond = model.nll(definition, &c.tokens)?;
        for j in c.ell..c.tokens.len() {
            let reduction = if unc[j] == cond[j] { 0.0 } else { (unc[j] - cond[j]) / unc[j] };
            out.push(NllReduction {
                continuation: i,
                position: j + 1,
                token: c.tokens[j],
                in_definition: def.contains(&c.tokens[j]),
                nll_unconditioned: unc[j],
                nll_conditioned: cond[j],
                reduction,
            });
        }
    }
    Ok(out)
}

/// One-sided paired bootstrap p-value for "a is lower than b" (lower is
/// better, as for perplexities): the fraction of resamples in which `a`
/// fails to improve, i.e. `mean(a) - mean(b) >= 0`. Identical inputs give
/// 1.0; `a` below `b` everywhere gives 0.0. When the `n^n` possible
/// resamples are no more than `n_resamples`, they are enumerated instead of
/// drawn, giving the exact bootstrap p-value.
pub fn paired_bootstrap(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    check_paired(a, b)?;
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    let n = a.len();
    if n <= EXACT_MAX_N && n.pow(n as u32) <= n_resamples {
        return paired_bootstrap_exact(a, b);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = rng::stream(seed, "bootstrap");
    let mut hits = 0usize;
    for _ in 0..n_resamples {
        let s: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
        hits += usize::from(not_improved(s));
    }
    Ok(hits as f64 / n_resamples as f64)
}

/// Largest sample size [`paired_bootstrap_exact`] accepts.
pub const EXACT_MAX_N: usize = 7;

/// Exact bootstrap p-value by enumerating all `n^n` index tuples; feasible
/// only for very small `n`.
pub fn paired_bootstrap_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    check_paired(a, b)?;
    let n = a.len();
    if n > EXACT_MAX_N {
        return Err(Error::InvalidArgument(format!("exact enumeration over {n}^{n} tuples is too large")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let total = n.pow(n as u32);
    let mut hits = 0usize;
    for code in 0..total {
        let mut c = code;
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[c % n];
            c /= n;
        }
        hits += usize::from(not_improved(s));
    }
    Ok(hits as f64 / total as f64)
}

/// `a` failed to improve over `b` on this resample (ties count as failure).
fn not_improved(sum_diff: f64) -> bool {
    sum_diff >= 0.0
}

fn check_paired(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least two paired values".into()));
    }
    Ok(())
}

/// Per-editor summary row: pre, post and delta for target and specificity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub editor: String,
    pub target_pre: f64,
    pub target_post: f64,
    pub target_delta: f64,
    pub specificity_pre: f64,
    pub specificity_post: f64,
    pub specificity_delta: f64,
    pub accuracy_pre: Option<f64>,
    pub accuracy_post: Option<f64>,
    #[serde(skip)]
    pub per_probe: Vec<ProbeRow>,
}

impl EvalReport {
    pub fn new(editor: &str, target_pre: &PplResult, target_post: &PplResult, spec: &SpecificityResult) -> Self {
        let per_probe = target_pre
            .per_probe
            .iter()
            .zip(&target_post.per_probe)
            .map(|(a, b)| ProbeRow {
                probe_id: a.probe_id.clone(),
                editor: editor.to_string(),
                pre: a.ppl,
                post: b.ppl,
                delta: compute_delta(a.ppl, b.ppl),
            })
            .collect();
        Self {
            editor: editor.to_string(),
            target_pre: target_pre.mean,
            target_post: target_post.mean,
            target_delta: compute_delta(target_pre.mean, target_post.mean),
            specificity_pre: spec.pre,
            specificity_post: spec.post,
            specificity_delta: spec.delta,
            accuracy_pre: None,
            accuracy_post: None,
            per_probe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub probe_id: String,
    pub editor: String,
    pub pre: f64,
    pub post: f64,
    pub delta: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    editor: &'a str,
    target_pre: f64,
    target_post: f64,
    target_delta: f64,
    spec_pre: f64,
    spec_post: f64,
    spec_delta: f64,
    acc_pre: Option<f64>,
    acc_post: Option<f64>,
}

/// Summary table with perplexities rounded to one decimal.
pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(SummaryRow {
            editor: &r.editor,
            target_pre: round1(r.target_pre),
            target_post: round1(r.target_post),
            target_delta: round1(r.target_delta),
            spec_pre: round1(r.specificity_pre),
            spec_post: round1(r.specificity_post),
            spec_delta: round1(r.specificity_delta),
            acc_pre: r.accuracy_pre,
            acc_post: r.accuracy_post,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReductionRow {
    token: String,
    in_definition: bool,
    nll_unc: f64,
    reduction: f64,
}

pub fn write_reduction_csv(path: &Path, rows: &[NllReduction], v: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(ReductionRow {
            token: v.token(r.token).unwrap_or(crate::tokenizer::UNK).to_string(),
            in_definition: r.in_definition,
            nll_unc: r.nll_unconditioned,
            reduction: r.reduction,
        })?;
    }
    w.flush()?;
    Ok(())
}
