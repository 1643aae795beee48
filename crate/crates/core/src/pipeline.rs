//! Experiment orchestration: run configs, run directories with manifests,
//! and the stages pretrain, gen-world, gen-transfer, edit, eval, sweep and
//! ablate.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod sweep;

pub use artifacts::{Manifest, RunDir, CODE_VERSION};
pub use config::{EditMode, RunConfig};
pub use experiment::{apply_editor, EditOutcome, EditorRun, EntityResult, Evaluator, Workbench};
pub use sweep::{AblationRow, SweepAxis, SweepPoint, SweepRun};
