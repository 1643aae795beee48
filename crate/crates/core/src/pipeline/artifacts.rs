use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::EditorKind;
use crate::error::{Error, Result};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Paths of every artifact inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn vocab(&self) -> PathBuf {
        self.world().join("vocab.txt")
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base().join("base.ckpt")
    }

    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer")
    }

    pub fn transfer_sets(&self) -> PathBuf {
        self.transfer().join("transfer.jsonl")
    }

    pub fn edits(&self, kind: EditorKind) -> PathBuf {
        self.root.join("edits").join(kind.name())
    }

    /// Checkpoint of a single-entity edit, or of the batch edit when
    /// `entity_id` is `None`.
    pub fn edited_checkpoint(&self, kind: EditorKind, entity_id: Option<&str>) -> PathBuf {
        self.edits(kind).join(format!("{}.ckpt", entity_id.unwrap_or("batch")))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn summary_csv(&self) -> PathBuf {
        self.eval().join("summary.csv")
    }

    /// Fails with a missing-artifact error unless `path` exists.
    pub fn require(path: &Path) -> Result<&Path> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path.to_path_buf()))
        }
    }
}

/// Provenance written next to each stage's outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub code_version: String,
    pub config_hash: String,
    /// File name to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(stage: &str, config_hash: String) -> Self {
        Self {
            stage: stage.to_string(),
            code_version: CODE_VERSION.to_string(),
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, root: &Path, path: &Path) -> Result<Self> {
        self.inputs.insert(relative(root, path), file_sha256(path)?);
        Ok(self)
    }

    pub fn output(mut self, root: &Path, path: &Path) -> Result<Self> {
        self.outputs.insert(relative(root, path), file_sha256(path)?);
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        RunDir::require(&path)?;
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Reads the manifest in `dir` and checks it was produced under the
    /// same upstream settings.
    pub fn check(dir: &Path, stage: &str, expected_hash: &str) -> Result<Self> {
        let m = Self::read(dir)?;
        if m.config_hash != expected_hash {
            return Err(Error::Config(format!(
                "{stage} artifacts in {} were built with config hash {} but the current config hashes to {expected_hash}; \
                 rerun the {stage} stage",
                dir.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(RunDir::require(path)?)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}
