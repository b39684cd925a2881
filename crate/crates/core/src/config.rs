//! TOML run configuration.
//!
//! ```toml
//! model = "mmaml"            # mmaml | maml | multi-maml | lstm-learner
//!
//! [training]                 # every key optional, see `TrainingConfig`
//! iterations = 10000
//! modes = 2                  # 2, 3, 5 or a list such as ["sinusoidal", "tanh"]
//!
//! [eval]
//! tasks_per_mode = 1000
//! seed = 20190101
//!
//! [output]
//! dir = "runs/default"
//! checkpoint_every = 1000    # 0 writes only the final checkpoint
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{ModelKind, TrainingConfig};

pub const DEFAULT_EVAL_SEED: u64 = 20_190_101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks_per_mode: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tasks_per_mode: 1000, seed: DEFAULT_EVAL_SEED }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), checkpoint_every: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelKind::Mmaml, training: TrainingConfig::default(), eval: EvalConfig::default(), output: OutputConfig::default() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.training.validate()?;
        if cfg.eval.tasks_per_mode == 0 {
            return Err(Error::Config("eval.tasks_per_mode must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
