use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::artifacts::{Manifest, RunDir};
use super::config::{EditMode, GenerationSettings, RunConfig};
use crate::baselines::{self, EditorKind};
use crate::distiller::{self, EditConfig, EditRecord, StepLoss};
use crate::error::{Error, Result};
use crate::evalsuite::{self, EvalReport, PplResult, Prepend, ProbeScore, SpecificityResult};
use crate::lm::{self, LanguageModel, Role, TrainLogEntry};
use crate::rng;
use crate::sampler::{self, EntityTokens, GenerationSpec, TransferSet};
use crate::tokenizer::{TokenSeq, Vocabulary};
use crate::world::{self, EntityRecord, ProbeExample, Tier, World, CONTINUE_PROMPT};

/// World, vocabulary and pretrained base model of one run.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub config: RunConfig,
    pub world: World,
    pub corpus: Vec<String>,
    pub vocab: Vocabulary,
    pub base: LanguageModel,
}

/// Generates the world, its pretraining corpus and the vocabulary.
pub fn build_world(cfg: &RunConfig) -> Result<(World, Vec<String>, Vocabulary)> {
    let world = world::generate_world(&cfg.world)?;
    let corpus = world::generate_corpus(&world, cfg.world.seed);
    let vocab = world.build_vocabulary(&corpus)?;
    Ok((world, corpus, vocab))
}

/// Tokens that occur in the corpus (plus specials), and the background
/// entity name tokens used as the reference population for unseen tokens.
pub fn unseen_token_masks(world: &World, corpus: &[TokenSeq], vocab: &Vocabulary) -> (Vec<bool>, Vec<bool>) {
    let mut seen = vec![false; vocab.size()];
    for id in [Vocabulary::PAD_ID, Vocabulary::BOS_ID, Vocabulary::EOS_ID, Vocabulary::UNK_ID] {
        seen[id as usize] = true;
    }
    for s in corpus {
        for &t in s.iter() {
            seen[t as usize] = true;
        }
    }
    let mut reference = vec![false; vocab.size()];
    for e in world.by_tier(Tier::Background) {
        for &t in e.name_tokens(vocab).iter() {
            reference[t as usize] = true;
        }
    }
    (seen, reference)
}

/// Pretrains the base model on the corpus and, if configured, initializes
/// the embeddings of tokens the corpus never contains.
pub fn pretrain_base(
    cfg: &RunConfig,
    world: &World,
    corpus: &[String],
    vocab: &Vocabulary,
) -> Result<(LanguageModel, Vec<TrainLogEntry>)> {
    let mut model = LanguageModel::new(cfg.model.model_config(vocab.size()), cfg.pretrain.seed)?;
    let seqs = world::encode_corpus(corpus, vocab);
    let log = lm::pretrain(&mut model, &seqs, &cfg.pretrain.train_config())?;
    if cfg.pretrain.init_unseen_tokens {
        let (seen, reference) = unseen_token_masks(world, &seqs, vocab);
        let n = model.initialize_unseen_tokens(&seen, &reference, cfg.pretrain.seed)?;
        log::info!("initialized {n} unseen token embeddings");
    }
    Ok((model.with_role(Role::Base), log))
}

impl Workbench {
    /// Generates and pretrains everything in memory.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let (world, corpus, vocab) = build_world(cfg)?;
        let (base, _) = pretrain_base(cfg, &world, &corpus, &vocab)?;
        Ok(Self { config: cfg.clone(), world, corpus, vocab, base })
    }

    /// Loads the world and base stages from `run`, checking that they were
    /// produced under `cfg`.
    pub fn load(cfg: &RunConfig, run: &RunDir) -> Result<Self> {
        Manifest::check(&run.world(), "gen-world", &cfg.world_hash())?;
        Manifest::check(&run.base(), "pretrain", &cfg.base_hash())?;
        let (world, corpus) = World::load(&run.world())?;
        let vocab = Vocabulary::load(RunDir::require(&run.vocab())?)?;
        let base = lm::load_checkpoint(RunDir::require(&run.base_checkpoint())?)?.with_role(Role::Base);
        Ok(Self { config: cfg.clone(), world, corpus, vocab, base })
    }

    /// Loads the world and base stages from `run`, first running whichever
    /// of them is missing or stale.
    pub fn prepare(cfg: &RunConfig, run: &RunDir) -> Result<Self> {
        if Manifest::check(&run.world(), "gen-world", &cfg.world_hash()).is_err() {
            super::commands::gen_world(cfg, run)?;
        }
        if Manifest::check(&run.base(), "pretrain", &cfg.base_hash()).is_err() {
            super::commands::pretrain(cfg, run)?;
        }
        Self::load(cfg, run)
    }

    /// A copy evaluated under a different run config (same world and base).
    pub fn with_config(&self, cfg: RunConfig) -> Self {
        Self { config: cfg, ..self.clone() }
    }

    /// `n` novel entities in a seeded order; smaller `n` gives a prefix of
    /// larger `n` under the same seed.
    pub fn select_entities(&self, n: usize, seed: u64) -> Result<Vec<&EntityRecord>> {
        let mut novel = self.world.novel();
        if novel.len() < n {
            return Err(Error::InsufficientPool { need: n, have: novel.len() });
        }
        novel.shuffle(&mut rng::stream(seed, "entity-selection"));
        novel.truncate(n);
        Ok(novel)
    }

    pub fn entity_tokens(&self, entities: &[&EntityRecord]) -> Vec<EntityTokens> {
        entities.iter().map(|e| e.tokens(&self.vocab)).collect()
    }

    pub fn generation_spec(&self, gen: &GenerationSettings, n_continuations: usize, seed: u64) -> GenerationSpec {
        GenerationSpec {
            prompt: self.vocab.encode(CONTINUE_PROMPT),
            nucleus_p: gen.nucleus_p,
            max_new_tokens: gen.max_new_tokens,
            n_continuations,
            seed,
        }
    }

    /// Samples one transfer set per entity from the base model.
    pub fn transfer_sets(&self, entities: &[EntityTokens], n_continuations: usize, seed: u64) -> Result<Vec<TransferSet>> {
        let spec = self.generation_spec(&self.config.generation, n_continuations, seed);
        let generator = self.base.deep_copy(Role::Generator);
        entities.iter().map(|e| sampler::build_transfer_set(&generator, e, &spec)).collect()
    }

    /// Entities selected by the run config, paired with fresh transfer sets.
    pub fn edit_items(&self) -> Result<Vec<(EntityTokens, TransferSet)>> {
        let cfg = &self.config;
        let entities = self.entity_tokens(&self.select_entities(cfg.eval.n_entities, cfg.seed)?);
        let sets = self.transfer_sets(&entities, cfg.edit.n_continuations, cfg.seed)?;
        Ok(entities.into_iter().zip(sets).collect())
    }

    pub fn probes(&self, entity_id: &str) -> Vec<ProbeExample> {
        self.world.probes_for(entity_id).iter().map(|p| p.encode(&self.vocab)).collect()
    }

    pub fn specificity_probes(&self) -> Result<Vec<ProbeExample>> {
        let n = self.config.eval.specificity_probes;
        Ok(world::split_specificity_set(&self.world, n, self.world.spec.seed, &[])?
            .iter()
            .map(|p| p.encode(&self.vocab))
            .collect())
    }
}

/// A trainable editor's output.
#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub model: LanguageModel,
    pub record: EditRecord,
}

/// Applies a trainable editor to a copy of `base`. One item gives a
/// single-entity edit; several items are edited into the same model.
/// Fine-tuning baselines take `epochs × n_continuations` steps per entity,
/// the update count of distillation.
pub fn apply_editor(
    base: &LanguageModel,
    kind: EditorKind,
    cfg: &EditConfig,
    items: &[(EntityTokens, TransferSet)],
) -> Result<EditOutcome> {
    if items.is_empty() {
        return Err(Error::EmptyInput("entities to edit"));
    }
    cfg.validate()?;
    let mut student = base.deep_copy(Role::Student);
    let start = Instant::now();
    let steps = cfg.epochs * cfg.n_continuations;
    let trace = match kind {
        EditorKind::Distill => {
            let record = if let [(e, t)] = items {
                distiller::distill_entity(base, &mut student, e, t, cfg)?
            } else {
                distiller::distill_batch(base, &mut student, items, cfg)?
            };
            return Ok(EditOutcome { model: student, record });
        }
        EditorKind::FtDefinitionFull | EditorKind::FtDefinitionLastLayer => {
            let scope = kind.scope().expect("trainable");
            if let [(e, _)] = items {
                baselines::finetune_definition(&mut student, &e.definition, cfg.learning_rate, steps, scope)?
            } else {
                let defs: Vec<&[u32]> = items.iter().map(|(e, _)| e.definition.ids()).collect();
                baselines::finetune_definitions(&mut student, &defs, cfg.learning_rate, steps, scope, cfg.seed)?
            }
        }
        EditorKind::FtTransfer => {
            let mut trace = Vec::new();
            for (e, t) in items {
                trace.extend(baselines::finetune_transfer(&mut student, &e.definition, t, cfg)?);
            }
            trace
        }
        EditorKind::Prepend | EditorKind::PrependRandom => {
            return Err(Error::Config(format!(
                "{kind} conditions the unedited model on a definition at evaluation time; it has no edit stage \
                 (run eval instead)"
            )))
        }
        EditorKind::External => {
            return Err(baselines::external_editor_stub(&baselines::EditorSpec { kind, config: cfg.clone() })
                .expect_err("stub always fails"))
        }
    };
    let entity_ids: Vec<String> = items.iter().map(|(e, _)| e.id.clone()).collect();
    let losses = trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| StepLoss {
            step,
            entity_id: if items.len() == 1 { entity_ids[0].clone() } else { String::new() },
            continuation: 0,
            epoch: step,
            loss,
        })
        .collect();
    let record = EditRecord {
        entity_ids,
        config: cfg.clone(),
        base_checksum: base.checksum(),
        student_checksum: student.checksum(),
        losses,
        skipped: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(EditOutcome { model: student, record })
}

/// Per-entity measurements before and after an edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityResult {
    pub entity_id: String,
    pub target_pre: f64,
    pub target_post: f64,
    pub accuracy_pre: f64,
    pub accuracy_post: f64,
    pub definition_ppl_pre: f64,
    /// `None` for evaluation-time editors, which leave the model unchanged.
    pub definition_ppl_post: Option<f64>,
    /// Specificity perplexity after this entity's edit (single-entity mode).
    pub specificity_post: Option<f64>,
}

impl EntityResult {
    pub fn target_gain(&self) -> f64 {
        self.target_pre - self.target_post
    }
}

/// One editor's evaluation on a set of entities.
#[derive(Clone, Debug)]
pub struct EditorRun {
    pub kind: EditorKind,
    pub config: Option<EditConfig>,
    pub mode: EditMode,
    pub report: EvalReport,
    pub target_post: PplResult,
    pub entities: Vec<EntityResult>,
    pub records: Vec<EditRecord>,
}

impl EditorRun {
    /// Mean target perplexity before minus after.
    pub fn target_gain(&self) -> f64 {
        self.report.target_pre - self.report.target_post
    }

    pub fn specificity_relative(&self) -> f64 {
        self.report.specificity_delta / self.report.specificity_pre
    }

    /// Fraction of entities whose mean target perplexity went down.
    pub fn fraction_improved(&self) -> f64 {
        let n = self.entities.iter().filter(|e| e.target_post < e.target_pre).count();
        n as f64 / self.entities.len() as f64
    }
}

struct EntityBaseline {
    probes: Vec<ProbeExample>,
    target: PplResult,
    accuracy: f64,
    definition_ppl: f64,
}

/// Pre-edit measurements shared by every editor evaluated on the same
/// entities.
pub struct Evaluator<'a> {
    bench: &'a Workbench,
    items: Vec<(EntityTokens, TransferSet)>,
    baselines: Vec<EntityBaseline>,
    spec_probes: Vec<ProbeExample>,
    spec_pre: PplResult,
    target_pre: PplResult,
    accuracy_pre: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(bench: &'a Workbench, items: Vec<(EntityTokens, TransferSet)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyInput("entities to evaluate"));
        }
        let spec_probes = bench.specificity_probes()?;
        let spec_pre = evalsuite::eval_target_ppl(&bench.base, &spec_probes, Prepend::None)?;
        let mut baselines = Vec::with_capacity(items.len());
        for (e, _) in &items {
            let probes = bench.probes(&e.id);
            let target = evalsuite::eval_target_ppl(&bench.base, &probes, Prepend::None)?;
            let accuracy = evalsuite::eval_accuracy(&bench.base, &probes, Prepend::None)?.accuracy;
            let definition_ppl = evalsuite::eval_definition_ppl(&bench.base, &e.definition)?.ppl;
            baselines.push(EntityBaseline { probes, target, accuracy, definition_ppl });
        }
        let target_pre = concat(baselines.iter().map(|b| &b.target));
        let accuracy_pre = weighted_accuracy(baselines.iter().map(|b| (b.accuracy, b.probes.len())));
        Ok(Self { bench, items, baselines, spec_probes, spec_pre, target_pre, accuracy_pre })
    }

    pub fn items(&self) -> &[(EntityTokens, TransferSet)] {
        &self.items
    }

    pub fn target_pre(&self) -> &PplResult {
        &self.target_pre
    }

    pub fn specificity_pre(&self) -> &PplResult {
        &self.spec_pre
    }

    /// Edits with `kind` (per entity or all at once) and evaluates. Edited
    /// models are handed to `sink` (entity id, or `None` for a batch edit)
    /// before being dropped. Ablations rewire the edit inputs only;
    /// evaluation always uses each entity's own probes.
    pub fn run(
        &self,
        kind: EditorKind,
        cfg: &EditConfig,
        mode: EditMode,
        sink: &mut dyn FnMut(Option<&str>, &LanguageModel, &EditRecord) -> Result<()>,
    ) -> Result<EditorRun> {
        if kind.scope().is_none() {
            return self.run_prepend(kind);
        }
        let edit_items = distiller::apply_ablation(&self.items, cfg.ablation, cfg.seed)?;
        let mut records = Vec::new();
        let mut load = |i: Option<usize>| -> Result<LanguageModel> {
            let slice = match i {
                Some(i) => &edit_items[i..i + 1],
                None => &edit_items[..],
            };
            let out = apply_editor(&self.bench.base, kind, cfg, slice)?;
            sink(i.map(|i| self.items[i].0.id.as_str()), &out.model, &out.record)?;
            records.push(out.record);
            Ok(out.model)
        };
        let mut run = self.evaluate_models(kind, mode, &mut load)?;
        run.config = Some(cfg.clone());
        run.records = records;
        Ok(run)
    }

    /// Evaluates edited models obtained from `load`: called with each
    /// entity index in single-entity mode, or once with `None` in batch
    /// mode.
    pub fn evaluate_models(
        &self,
        kind: EditorKind,
        mode: EditMode,
        load: &mut dyn FnMut(Option<usize>) -> Result<LanguageModel>,
    ) -> Result<EditorRun> {
        let mut entities = Vec::with_capacity(self.items.len());
        let mut posts = Vec::with_capacity(self.items.len());
        let spec_post;
        match mode {
            EditMode::Single => {
                let mut spec_sum = 0.0;
                for i in 0..self.items.len() {
                    let model = load(Some(i))?;
                    let id = self.items[i].0.id.as_str();
                    let spec = evalsuite::eval_specificity(&model, &self.spec_probes, &self.spec_pre, &[id])?;
                    spec_sum += spec.post;
                    let (r, post) = self.score_entity(i, &model, Some(spec.post))?;
                    entities.push(r);
                    posts.push(post);
                }
                spec_post = spec_sum / self.items.len() as f64;
            }
            EditMode::Batch => {
                let model = load(None)?;
                let ids: Vec<&str> = self.items.iter().map(|(e, _)| e.id.as_str()).collect();
                spec_post = evalsuite::eval_specificity(&model, &self.spec_probes, &self.spec_pre, &ids)?.post;
                for i in 0..self.items.len() {
                    let (r, post) = self.score_entity(i, &model, None)?;
                    entities.push(r);
                    posts.push(post);
                }
            }
        }
        Ok(self.finish(kind, None, mode, entities, &posts, spec_post))
    }

    fn score_entity(&self, i: usize, model: &LanguageModel, spec_post: Option<f64>) -> Result<(EntityResult, PplResult)> {
        let (e, _) = &self.items[i];
        let b = &self.baselines[i];
        let post = evalsuite::eval_target_ppl(model, &b.probes, Prepend::None)?;
        let acc = evalsuite::eval_accuracy(model, &b.probes, Prepend::None)?.accuracy;
        let def = evalsuite::eval_definition_ppl(model, &e.definition)?.ppl;
        let r = EntityResult {
            entity_id: e.id.clone(),
            target_pre: b.target.mean,
            target_post: post.mean,
            accuracy_pre: b.accuracy,
            accuracy_post: acc,
            definition_ppl_pre: b.definition_ppl,
            definition_ppl_post: Some(def),
            specificity_post: spec_post,
        };
        Ok((r, post))
    }

    /// The unedited model with a definition before every probe: the
    /// entity's own for `Prepend`, another entity's for `PrependRandom`.
    /// Specificity probes get the same definition as the entity's probes.
    fn run_prepend(&self, kind: EditorKind) -> Result<EditorRun> {
        let base = &self.bench.base;
        let pool: Vec<EntityTokens> = self.items.iter().map(|(e, _)| e.clone()).collect();
        let seed = self.bench.config.seed;
        let mut entities = Vec::with_capacity(self.items.len());
        let mut posts = Vec::with_capacity(self.items.len());
        let mut spec_sum = 0.0;
        for (i, (e, _)) in self.items.iter().enumerate() {
            let b = &self.baselines[i];
            let mut scores = Vec::with_capacity(b.probes.len());
            let mut correct = 0usize;
            for p in &b.probes {
                let eval = match kind {
                    EditorKind::Prepend => baselines::prepend_eval(base, &e.definition, p)?,
                    EditorKind::PrependRandom => baselines::prepend_random_eval(base, &pool, p, seed)?,
                    _ => return Err(Error::NotImplemented(format!("{kind} cannot be evaluated without a checkpoint"))),
                };
                if let Some(s) = &eval.option_scores {
                    correct += usize::from(evalsuite::argmax_lowest(s).0 == p.gold);
                }
                scores.push(ProbeScore { probe_id: p.id.clone(), entity_id: p.entity_id.clone(), ppl: eval.ppl });
            }
            let mean = scores.iter().map(|s| s.ppl).sum::<f64>() / scores.len() as f64;
            let spec_def = match kind {
                EditorKind::Prepend => e.definition.clone(),
                _ => baselines::random_other_definition(&pool, &e.id, &e.id, seed)?.definition.clone(),
            };
            let spec = evalsuite::eval_target_ppl(base, &self.spec_probes, Prepend::Fixed(&spec_def))?;
            spec_sum += spec.mean;
            entities.push(EntityResult {
                entity_id: e.id.clone(),
                target_pre: b.target.mean,
                target_post: mean,
                accuracy_pre: b.accuracy,
                accuracy_post: correct as f64 / b.probes.len() as f64,
                definition_ppl_pre: b.definition_ppl,
                definition_ppl_post: None,
                specificity_post: Some(spec.mean),
            });
            posts.push(PplResult { mean, per_probe: scores });
        }
        let spec_post = spec_sum / self.items.len() as f64;
        Ok(self.finish(kind, None, EditMode::Single, entities, &posts, spec_post))
    }

    fn finish(
        &self,
        kind: EditorKind,
        config: Option<EditConfig>,
        mode: EditMode,
        entities: Vec<EntityResult>,
        posts: &[PplResult],
        spec_post: f64,
    ) -> EditorRun {
        let target_post = concat(posts.iter());
        let delta = evalsuite::compute_delta(self.spec_pre.mean, spec_post);
        let spec =
            SpecificityResult { pre: self.spec_pre.mean, post: spec_post, delta, relative: delta / self.spec_pre.mean };
        let mut report = EvalReport::new(kind.name(), &self.target_pre, &target_post, &spec);
        report.accuracy_pre = Some(self.accuracy_pre);
        report.accuracy_post =
            Some(weighted_accuracy(entities.iter().zip(&self.baselines).map(|(r, b)| (r.accuracy_post, b.probes.len()))));
        EditorRun { kind, config, mode, report, target_post, entities, records: Vec::new() }
    }
}

fn concat<'r>(parts: impl Iterator<Item = &'r PplResult>) -> PplResult {
    let per_probe: Vec<ProbeScore> = parts.flat_map(|p| p.per_probe.iter().cloned()).collect();
    let mean = per_probe.iter().map(|p| p.ppl).sum::<f64>() / per_probe.len().max(1) as f64;
    PplResult { mean, per_probe }
}

fn weighted_accuracy(parts: impl Iterator<Item = (f64, usize)>) -> f64 {
    let (mut correct, mut n) = (0.0, 0usize);
    for (acc, k) in parts {
        correct += acc * k as f64;
        n += k;
    }
    correct / n.max(1) as f64
}

/// Entity id to definition tokens, for per-entity prepending.
pub fn definition_map(items: &[(EntityTokens, TransferSet)]) -> HashMap<String, TokenSeq> {
    items.iter().map(|(e, _)| (e.id.clone(), e.definition.clone())).collect()
}
