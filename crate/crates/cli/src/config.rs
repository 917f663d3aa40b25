//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use essd_core::eval::EvalConfig;
use essd_core::model::ModelSpec;
use essd_core::train::TrainConfig;

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchParams {
    pub n_warmup: usize,
    pub n_timed: usize,
}

impl Default for BenchParams {
    fn default() -> Self {
        Self { n_warmup: 10, n_timed: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub weights: Option<PathBuf>,
    pub init_weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a command may read from `--config`. Flags override fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchParams,
    pub paths: Paths,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::missing(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }
}
