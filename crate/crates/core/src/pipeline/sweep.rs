use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::RunDir;
use super::config::{EditMode, RunConfig};
use super::experiment::{Evaluator, Workbench};
use crate::baselines::EditorKind;
use crate::distiller::Ablation;
use crate::error::{Error, Result};

/// Config keys a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Entities edited into one model together.
    NEntities,
    /// Learning rate of every trainable editor in the run.
    LearningRate,
    /// Distinct continuations per entity, with the per-entity update count
    /// held at `sweep.total_updates`.
    NContinuations,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::NEntities => "n_entities",
            Self::LearningRate => "learning_rate",
            Self::NContinuations => "n_continuations",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut c = cfg.clone();
        match self {
            Self::NEntities => {
                c.eval.n_entities = as_count(value, self)?;
                c.eval.mode = EditMode::Batch;
            }
            Self::LearningRate => {
                for k in cfg.editors.iter().filter(|k| k.scope().is_some()) {
                    c.learning_rates.insert(*k, value);
                }
            }
            Self::NContinuations => {
                let n = as_count(value, self)?;
                let total = cfg.sweep.total_updates;
                if total % n != 0 {
                    return Err(Error::Config(format!(
                        "sweep.total_updates {total} is not divisible by n_continuations {n}"
                    )));
                }
                c.edit.n_continuations = n;
                c.edit.epochs = total / n;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::NEntities, Self::LearningRate, Self::NContinuations]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?} (n_entities, learning_rate, n_continuations)")))
    }
}

fn as_count(value: f64, axis: SweepAxis) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!("{axis} values must be positive integers, got {value}")))
    }
}

/// Parses a comma-separated list of axis values.
pub fn parse_values(csv: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = csv
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad sweep value {v:?}: {e}"))))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(values)
}

/// One edit+eval of one editor at one axis value and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub editor: String,
    pub n_entities: usize,
    pub target_pre: f64,
    pub target_post: f64,
    /// Mean over entities of per-entity (pre - post) target perplexity.
    pub target_gain: f64,
    pub specificity_pre: f64,
    pub specificity_post: f64,
    pub specificity_relative: f64,
    /// Empty on success; the failure message otherwise.
    pub error: String,
}

/// Mean and range over seeds of one (value, editor) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: f64,
    pub editor: String,
    pub runs: usize,
    pub failures: usize,
    pub target_post_mean: f64,
    pub target_post_min: f64,
    pub target_post_max: f64,
    pub target_gain_mean: f64,
    pub target_gain_min: f64,
    pub target_gain_max: f64,
    pub specificity_relative_mean: f64,
    pub specificity_relative_min: f64,
    pub specificity_relative_max: f64,
}

/// Runs every trainable editor of `cfg` at each axis value for each seed
/// in `cfg.sweep.seeds`. Seeds vary entity selection, sampling and edit
/// order; world and base model are shared. Failed points are recorded and
/// the sweep continues.
pub fn sweep(bench: &Workbench, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRun>> {
    let cfg = &bench.config;
    let kinds: Vec<EditorKind> = cfg.editors.iter().copied().filter(|k| k.scope().is_some()).collect();
    if kinds.is_empty() {
        return Err(Error::Config("sweep needs at least one trainable editor".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in &cfg.sweep.seeds {
            let mut point = match axis.apply(cfg, value) {
                Ok(c) => c,
                Err(e) => {
                    for k in &kinds {
                        rows.push(failed(axis, value, seed, *k, &e));
                    }
                    continue;
                }
            };
            point.seed = seed;
            let outcome = run_point(&bench.with_config(point.clone()), &kinds);
            match outcome {
                Ok(runs) => rows.extend(runs.into_iter().map(|mut r| {
                    r.axis = axis.name().to_string();
                    r.value = value;
                    r
                })),
                Err(e) => {
                    log::warn!("sweep point {axis}={value} seed {seed} failed: {e}");
                    for k in &kinds {
                        rows.push(failed(axis, value, seed, *k, &e));
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn run_point(bench: &Workbench, kinds: &[EditorKind]) -> Result<Vec<SweepRun>> {
    let cfg = &bench.config;
    let evaluator = Evaluator::new(bench, bench.edit_items()?)?;
    let mut out = Vec::new();
    for &k in kinds {
        let r = evaluator.run(k, &cfg.editor_config(k), cfg.eval.mode, &mut |_, _, _| Ok(()))?;
        let gain = r.entities.iter().map(|e| e.target_gain()).sum::<f64>() / r.entities.len() as f64;
        out.push(SweepRun {
            axis: String::new(),
            value: 0.0,
            seed: cfg.seed,
            editor: k.name().to_string(),
            n_entities: r.entities.len(),
            target_pre: r.report.target_pre,
            target_post: r.report.target_post,
            target_gain: gain,
            specificity_pre: r.report.specificity_pre,
            specificity_post: r.report.specificity_post,
            specificity_relative: r.specificity_relative(),
            error: String::new(),
        });
    }
    Ok(out)
}

fn failed(axis: SweepAxis, value: f64, seed: u64, kind: EditorKind, e: &Error) -> SweepRun {
    SweepRun {
        axis: axis.name().to_string(),
        value,
        seed,
        editor: kind.name().to_string(),
        n_entities: 0,
        target_pre: f64::NAN,
        target_post: f64::NAN,
        target_gain: f64::NAN,
        specificity_pre: f64::NAN,
        specificity_post: f64::NAN,
        specificity_relative: f64::NAN,
        error: e.to_string(),
    }
}

/// Groups runs by (value, editor) in first-seen order and summarizes the
/// successful ones.
pub fn aggregate(rows: &[SweepRun]) -> Vec<SweepPoint> {
    let mut order: Vec<(String, u64, String)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, String), Vec<&SweepRun>> = BTreeMap::new();
    for r in rows {
        let key = (r.axis.clone(), r.value.to_bits(), r.editor.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let runs = &groups[&key];
            let ok: Vec<&&SweepRun> = runs.iter().filter(|r| r.error.is_empty()).collect();
            let stat = |f: fn(&SweepRun) -> f64| -> (f64, f64, f64) {
                if ok.is_empty() {
                    return (f64::NAN, f64::NAN, f64::NAN);
                }
                let v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (mean, v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            };
            let (pm, pmin, pmax) = stat(|r| r.target_post);
            let (gm, gmin, gmax) = stat(|r| r.target_gain);
            let (sm, smin, smax) = stat(|r| r.specificity_relative);
            SweepPoint {
                axis: key.0.clone(),
                value: f64::from_bits(key.1),
                editor: key.2.clone(),
                runs: runs.len(),
                failures: runs.len() - ok.len(),
                target_post_mean: pm,
                target_post_min: pmin,
                target_post_max: pmax,
                target_gain_mean: gm,
                target_gain_min: gmin,
                target_gain_max: gmax,
                specificity_relative_mean: sm,
                specificity_relative_min: smin,
                specificity_relative_max: smax,
            }
        })
        .collect()
}

/// Writes `runs.csv` and the aggregated `summary.csv` into `dir`.
pub fn write_sweep(dir: &Path, rows: &[SweepRun]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("runs.csv"), rows)?;
    write_csv(&dir.join("summary.csv"), &aggregate(rows))
}

/// Reads a `runs.csv` written by [`write_sweep`].
pub fn read_runs(path: &Path) -> Result<Vec<SweepRun>> {
    let mut r = csv::Reader::from_path(RunDir::require(path)?)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One cell of the definition/transfer-set ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub definition: String,
    pub transfer_set: String,
    pub ablation: Ablation,
    pub target_pre: f64,
    pub target_post: f64,
    pub target_delta: f64,
    pub specificity_relative: f64,
}

/// Distillation with correct or random definitions and transfer sets,
/// all on the same entities, transfer sets and seed.
pub fn ablate(bench: &Workbench) -> Result<Vec<AblationRow>> {
    let cfg = &bench.config;
    if cfg.eval.n_entities < 10 {
        return Err(Error::Config(format!("ablation needs at least 10 entities, got {}", cfg.eval.n_entities)));
    }
    let evaluator = Evaluator::new(bench, bench.edit_items()?)?;
    let cells = [
        (Ablation::None, "correct", "correct"),
        (Ablation::RandomDefinition, "random", "correct"),
        (Ablation::RandomTransfer, "correct", "random"),
        (Ablation::RandomTransferEntityPrepended, "correct", "random+entity"),
    ];
    let mut rows = Vec::new();
    for (ablation, definition, transfer_set) in cells {
        let mut ecfg = cfg.editor_config(EditorKind::Distill);
        ecfg.ablation = ablation;
        let r = evaluator.run(EditorKind::Distill, &ecfg, cfg.eval.mode, &mut |_, _, _| Ok(()))?;
        rows.push(AblationRow {
            definition: definition.into(),
            transfer_set: transfer_set.into(),
            ablation,
            target_pre: r.report.target_pre,
            target_post: r.report.target_post,
            target_delta: r.report.target_delta,
            specificity_relative: r.specificity_relative(),
        });
    }
    Ok(rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_csv(path, rows)
}
