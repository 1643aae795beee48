use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::EditorKind;
use crate::distiller::{Ablation, EditConfig, LossReduction};
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, TrainConfig};
use crate::world::{WorldSpec, SPECIFICITY_PROBES};

/// Everything a run needs, serialized into the run directory before any
/// stage executes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Feeds entity selection, generation, edit shuffling and evaluation
    /// sampling. World and pretraining seeds live in their own sections.
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldSpec,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub generation: GenerationSettings,
    pub edit: EditSettings,
    pub editors: Vec<EditorKind>,
    /// Per-editor learning rates; editors not listed use their defaults.
    pub learning_rates: BTreeMap<EditorKind, f64>,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            world: WorldSpec::default(),
            model: ModelSettings::default(),
            pretrain: PretrainSettings::default(),
            generation: GenerationSettings::default(),
            edit: EditSettings::default(),
            editors: vec![
                EditorKind::FtDefinitionFull,
                EditorKind::FtDefinitionLastLayer,
                EditorKind::FtTransfer,
                EditorKind::Distill,
                EditorKind::Prepend,
                EditorKind::PrependRandom,
            ],
            learning_rates: BTreeMap::new(),
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, max_seq_len: 96, tie_embeddings: false }
    }
}

impl ModelSettings {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            vocab_size,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Re-draw embeddings of tokens absent from the corpus (the novel
    /// names) from the statistics of background name tokens.
    pub init_unseen_tokens: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 16, learning_rate: 1e-3, warmup: 100, seed: 0, init_unseen_tokens: true }
    }
}

impl PretrainSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            warmup: self.warmup,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub nucleus_p: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { nucleus_p: 0.9, max_new_tokens: 40 }
    }
}

/// Editor settings shared by all trainable editors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSettings {
    pub epochs: usize,
    pub temperature: f64,
    pub n_continuations: usize,
    pub reduction: LossReduction,
    pub ablation: Ablation,
}

impl Default for EditSettings {
    fn default() -> Self {
        let d = EditConfig::default();
        Self {
            epochs: d.epochs,
            temperature: d.temperature,
            n_continuations: d.n_continuations,
            reduction: d.reduction,
            ablation: d.ablation,
        }
    }
}

/// Whether entities are edited one at a time from the base model or all
/// into one model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    #[default]
    Single,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_entities: usize,
    pub mode: EditMode,
    pub specificity_probes: usize,
    pub bootstrap_resamples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_entities: 20,
            mode: EditMode::Single,
            specificity_probes: SPECIFICITY_PROBES,
            bootstrap_resamples: crate::evalsuite::BOOTSTRAP_RESAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub seeds: Vec<u64>,
    /// Update count per entity held fixed along the `n_continuations` axis.
    pub total_updates: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], total_updates: 10 }
    }
}

impl RunConfig {
    /// A scaled-down world and a short pretraining run that go end to end
    /// in about a minute; for examples and smoke tests.
    pub fn small() -> Self {
        let mut cfg = Self::default();
        cfg.world.n_popular = 40;
        cfg.world.n_novel = 12;
        cfg.world.n_background = 300;
        cfg.world.background_name_pool = 150;
        cfg.pretrain.steps = 1500;
        cfg.pretrain.warmup = 50;
        cfg.eval.n_entities = 10;
        cfg.eval.bootstrap_resamples = 1000;
        cfg
    }

    /// Reads a TOML file; missing keys take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the value at a dotted path such as `edit.epochs` or
    /// `learning_rates.distill`. The value is parsed as TOML, falling back
    /// to a bare string. The result is not validated, so several overrides
    /// may pass through an inconsistent state; call [`Self::validate`] last.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let value = parse_value(raw);
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().ok_or_else(|| Error::Config("empty config path".into()))?;
        let mut node = &mut root;
        for k in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*k))
                .ok_or_else(|| Error::Config(format!("unknown config path {path:?}")))?;
        }
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("{path:?} is not inside a section")))?;
        let open_map = parents == ["learning_rates"];
        if !open_map && !table.contains_key(*last) {
            return Err(Error::Config(format!("unknown config path {path:?}")));
        }
        table.insert(last.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.train_config().validate()?;
        self.model.model_config(crate::tokenizer::Vocabulary::UNK_ID as usize + 1).validate()?;
        for kind in &self.editors {
            if kind.scope().is_some() {
                self.editor_config(*kind).validate()?;
            }
        }
        if !(self.generation.nucleus_p > 0.0 && self.generation.nucleus_p <= 1.0) {
            return Err(Error::Config(format!("nucleus_p must be in (0, 1], got {}", self.generation.nucleus_p)));
        }
        if self.eval.n_entities == 0 {
            return Err(Error::Config("eval.n_entities must be positive".into()));
        }
        if self.eval.n_entities > self.world.n_novel {
            return Err(Error::Config(format!(
                "eval.n_entities {} exceeds world.n_novel {}",
                self.eval.n_entities, self.world.n_novel
            )));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, kind: EditorKind) -> f64 {
        self.learning_rates.get(&kind).copied().unwrap_or_else(|| kind.default_learning_rate())
    }

    /// The edit configuration `kind` runs with.
    pub fn editor_config(&self, kind: EditorKind) -> EditConfig {
        EditConfig {
            learning_rate: self.learning_rate(kind),
            epochs: self.edit.epochs,
            temperature: self.edit.temperature,
            n_continuations: self.edit.n_continuations,
            scope: kind.scope().unwrap_or_default(),
            reduction: self.edit.reduction,
            ablation: self.edit.ablation,
            seed: self.seed,
        }
    }

    /// Hash of the settings that determine the world bundle.
    pub fn world_hash(&self) -> String {
        digest(&[&json(&self.world)])
    }

    /// Hash of the settings that determine the base checkpoint.
    pub fn base_hash(&self) -> String {
        digest(&[&self.world_hash(), &json(&self.model), &json(&self.pretrain)])
    }

    /// Hash of the settings that determine the transfer sets.
    pub fn transfer_hash(&self) -> String {
        digest(&[
            &self.base_hash(),
            &json(&self.generation),
            &self.edit.n_continuations.to_string(),
            &self.eval.n_entities.to_string(),
            &self.seed.to_string(),
        ])
    }

    /// Hash of the settings that determine one editor's edited models.
    pub fn edit_hash(&self, kind: EditorKind) -> String {
        digest(&[&self.transfer_hash(), kind.name(), &json(&self.editor_config(kind)), &json(&self.eval.mode)])
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config sections serialize")
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}
