use std::fs;

use serde::Serialize;

use super::artifacts::{Manifest, RunDir};
use super::config::{EditMode, RunConfig};
use super::experiment::{build_world, pretrain_base, EditorRun, Evaluator, Workbench};
use crate::baselines::EditorKind;
use crate::error::{Error, Result};
use crate::evalsuite::{self, write_jsonl};
use crate::lm::{self, Role};
use crate::sampler::{self, EntityTokens, TransferSet};

/// Writes the resolved config into the run directory.
pub fn write_config(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    fs::create_dir_all(run.root())?;
    fs::write(run.config(), cfg.to_toml()?)?;
    Ok(())
}

/// Generates the world bundle and vocabulary.
pub fn gen_world(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    write_config(cfg, run)?;
    let (world, corpus, vocab) = build_world(cfg)?;
    let dir = run.world();
    world.save(&dir, &corpus)?;
    vocab.save(&run.vocab())?;
    let root = run.root();
    let mut m = Manifest::new("gen-world", cfg.world_hash());
    for f in ["entities.jsonl", "corpus.txt", "probes.jsonl", "specificity.jsonl", "schema.json", "vocab.txt"] {
        m = m.output(root, &dir.join(f))?;
    }
    m.write(&dir)?;
    log::info!("world: {} entities, {} documents, vocabulary {}", world.entities.len(), corpus.len(), vocab.size());
    Ok(())
}

/// Pretrains the base model on the world corpus.
pub fn pretrain(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    write_config(cfg, run)?;
    Manifest::check(&run.world(), "gen-world", &cfg.world_hash())?;
    let (world, corpus) = crate::world::World::load(&run.world())?;
    let vocab = crate::tokenizer::Vocabulary::load(RunDir::require(&run.vocab())?)?;
    let (model, log) = pretrain_base(cfg, &world, &corpus, &vocab)?;
    let dir = run.base();
    fs::create_dir_all(&dir)?;
    lm::save_checkpoint(&model, &run.base_checkpoint())?;
    write_jsonl(&dir.join("pretrain_log.jsonl"), &log)?;
    Manifest::new("pretrain", cfg.base_hash())
        .input(run.root(), &run.world().join(Manifest::FILE))?
        .output(run.root(), &run.base_checkpoint())?
        .write(&dir)?;
    let corpus_loss = lm::mean_token_loss(&model, &crate::world::encode_corpus(&corpus, &vocab))?;
    fs::write(dir.join("corpus_loss.txt"), format!("{corpus_loss}\n"))?;
    log::info!("pretrained {} steps, corpus loss {corpus_loss:.4}", log.len());
    Ok(())
}

#[derive(Serialize)]
struct TransferStatsRow<'a> {
    entity_id: &'a str,
    mean_tokens: f64,
    pct_in_definition: f64,
    mean_tokens_after_ell: f64,
}

/// Samples transfer sets for the selected entities.
pub fn gen_transfer(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    write_config(cfg, run)?;
    let bench = Workbench::load(cfg, run)?;
    let items = bench.edit_items()?;
    let dir = run.transfer();
    fs::create_dir_all(&dir)?;
    let mut text = String::new();
    let mut stats = csv::Writer::from_path(dir.join("stats.csv"))?;
    for (e, t) in &items {
        text.push_str(&t.to_jsonl(&bench.vocab)?);
        let s = sampler::transfer_stats(t, &e.definition)?;
        stats.serialize(TransferStatsRow {
            entity_id: &e.id,
            mean_tokens: s.mean_tokens,
            pct_in_definition: s.pct_in_definition,
            mean_tokens_after_ell: s.mean_tokens_after_ell,
        })?;
    }
    stats.flush()?;
    fs::write(run.transfer_sets(), text)?;
    Manifest::new("gen-transfer", cfg.transfer_hash())
        .input(run.root(), &run.base_checkpoint())?
        .output(run.root(), &run.transfer_sets())?
        .write(&dir)?;
    log::info!("sampled transfer sets for {} entities", items.len());
    Ok(())
}

/// Loads the transfer sets written by [`gen_transfer`], in entity order.
pub fn load_items(cfg: &RunConfig, run: &RunDir, bench: &Workbench) -> Result<Vec<(EntityTokens, TransferSet)>> {
    Manifest::check(&run.transfer(), "gen-transfer", &cfg.transfer_hash())?;
    let sets = TransferSet::from_jsonl(&fs::read_to_string(RunDir::require(&run.transfer_sets())?)?, &bench.vocab)?;
    sets.into_iter()
        .map(|t| {
            let e = bench.world.entity(&t.entity_id).ok_or_else(|| Error::UnknownEntity(t.entity_id.clone()))?;
            Ok((e.tokens(&bench.vocab), t))
        })
        .collect()
}

fn trainable(cfg: &RunConfig) -> Result<Vec<EditorKind>> {
    let kinds: Vec<EditorKind> = cfg.editors.iter().copied().filter(|k| k.scope().is_some()).collect();
    if kinds.is_empty() {
        let names: Vec<&str> = cfg.editors.iter().map(|k| k.name()).collect();
        return Err(Error::Config(format!(
            "no trainable editor among {names:?}: prepend editors condition the unedited model on a definition at \
             evaluation time and have no edit stage; use the eval subcommand"
        )));
    }
    Ok(kinds)
}

/// Edits the selected entities with every trainable editor in the config,
/// saving edited checkpoints and edit records.
pub fn edit(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    write_config(cfg, run)?;
    let kinds = trainable(cfg)?;
    let bench = Workbench::load(cfg, run)?;
    let items = load_items(cfg, run, &bench)?;
    for kind in kinds {
        let ecfg = cfg.editor_config(kind);
        let edit_items = crate::distiller::apply_ablation(&items, ecfg.ablation, ecfg.seed)?;
        let dir = run.edits(kind);
        fs::create_dir_all(&dir)?;
        let mut records = Vec::new();
        let mut paths = Vec::new();
        let mut save = |id: Option<&str>, slice: &[(EntityTokens, TransferSet)]| -> Result<()> {
            let out = super::experiment::apply_editor(&bench.base, kind, &ecfg, slice)?;
            let path = run.edited_checkpoint(kind, id);
            lm::save_checkpoint(&out.model, &path)?;
            paths.push(path);
            records.push(out.record);
            Ok(())
        };
        match cfg.eval.mode {
            EditMode::Single => {
                for i in 0..edit_items.len() {
                    save(Some(&items[i].0.id), &edit_items[i..i + 1])?;
                }
            }
            EditMode::Batch => save(None, &edit_items)?,
        }
        write_jsonl(&dir.join("edit_records.jsonl"), &records)?;
        let mut manifest = Manifest::new("edit", cfg.edit_hash(kind)).input(run.root(), &run.transfer_sets())?;
        for p in &paths {
            manifest = manifest.output(run.root(), p)?;
        }
        manifest.write(&dir)?;
        log::info!("{kind}: {} edit(s) written to {}", records.len(), dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EntityRow<'a> {
    editor: &'a str,
    entity_id: &'a str,
    target_pre: f64,
    target_post: f64,
    accuracy_pre: f64,
    accuracy_post: f64,
    definition_ppl_pre: f64,
    definition_ppl_post: Option<f64>,
    specificity_post: Option<f64>,
}

#[derive(Serialize)]
struct SignificanceRow<'a> {
    editor: &'a str,
    baseline: &'a str,
    mean_editor: f64,
    mean_baseline: f64,
    p_value: f64,
}

/// Evaluates every editor in the config: pre-edit metrics from the base
/// checkpoint, post-edit metrics from saved edits or from prepending.
pub fn eval(cfg: &RunConfig, run: &RunDir) -> Result<Vec<EditorRun>> {
    write_config(cfg, run)?;
    let bench = Workbench::load(cfg, run)?;
    let items = load_items(cfg, run, &bench)?;
    let evaluator = Evaluator::new(&bench, items)?;
    let mut runs = Vec::new();
    for &kind in &cfg.editors {
        let run_ = if kind.scope().is_some() {
            Manifest::check(&run.edits(kind), "edit", &cfg.edit_hash(kind))?;
            let ids: Vec<String> = evaluator.items().iter().map(|(e, _)| e.id.clone()).collect();
            let mut load = |i: Option<usize>| {
                let path = run.edited_checkpoint(kind, i.map(|i| ids[i].as_str()));
                Ok(lm::load_checkpoint(RunDir::require(&path)?)?.with_role(Role::Student))
            };
            evaluator.evaluate_models(kind, cfg.eval.mode, &mut load)?
        } else if kind == EditorKind::External {
            log::warn!("skipping {kind}: evaluate its checkpoints with baselines::load_external");
            continue;
        } else {
            evaluator.run(kind, &cfg.editor_config(kind), cfg.eval.mode, &mut |_, _, _| Ok(()))?
        };
        runs.push(run_);
    }
    write_eval_outputs(cfg, run, &runs)?;
    Ok(runs)
}

/// Table-style summary, per-entity rows, per-probe JSONL and paired
/// bootstrap p-values of each editor against distillation.
pub fn write_eval_outputs(cfg: &RunConfig, run: &RunDir, runs: &[EditorRun]) -> Result<()> {
    let dir = run.eval();
    fs::create_dir_all(&dir)?;
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    evalsuite::write_summary_csv(&run.summary_csv(), &reports)?;
    let probes: Vec<_> = runs.iter().flat_map(|r| r.report.per_probe.iter().cloned()).collect();
    write_jsonl(&dir.join("per_probe.jsonl"), &probes)?;
    let mut w = csv::Writer::from_path(dir.join("entities.csv"))?;
    for r in runs {
        for e in &r.entities {
            w.serialize(EntityRow {
                editor: r.kind.name(),
                entity_id: &e.entity_id,
                target_pre: e.target_pre,
                target_post: e.target_post,
                accuracy_pre: e.accuracy_pre,
                accuracy_post: e.accuracy_post,
                definition_ppl_pre: e.definition_ppl_pre,
                definition_ppl_post: e.definition_ppl_post,
                specificity_post: e.specificity_post,
            })?;
        }
    }
    w.flush()?;
    if let Some(d) = runs.iter().find(|r| r.kind == EditorKind::Distill) {
        let mut w = csv::Writer::from_path(dir.join("significance.csv"))?;
        for r in runs.iter().filter(|r| r.kind != EditorKind::Distill) {
            let a = d.target_post.values();
            let b = r.target_post.values();
            if a.len() < 2 || a.len() != b.len() {
                continue;
            }
            w.serialize(SignificanceRow {
                editor: d.kind.name(),
                baseline: r.kind.name(),
                mean_editor: d.report.target_post,
                mean_baseline: r.report.target_post,
                p_value: evalsuite::paired_bootstrap(&a, &b, cfg.eval.bootstrap_resamples, cfg.seed)?,
            })?;
        }
        w.flush()?;
    }
    Manifest::new("eval", cfg.transfer_hash()).output(run.root(), &run.summary_csv())?.write(&dir)?;
    Ok(())
}
