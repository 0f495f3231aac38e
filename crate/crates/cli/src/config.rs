use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sehm_core::bench::{AblationConfig, NeighborBenchmark};
use sehm_core::data::SyntheticSpec;
use sehm_core::explainer::ExplainerConfig;
use sehm_core::model::ModelConfig;
use sehm_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Settings of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// AOPC cutoffs in perturbed `(t, d)` positions, ascending.
    pub cutoffs: Vec<usize>,
    /// Test samples used for AOPC, local accuracy and stability.
    pub samples: usize,
    /// Random rankings averaged for the AOPC baseline.
    pub random_rankings: usize,
    pub lipschitz_perturbations: usize,
    /// Stability radius as a fraction of the mean `‖z‖₂`.
    pub lipschitz_delta_frac: f64,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![10, 50, 100, 500, 2000],
            samples: 64,
            random_rankings: 20,
            lipschitz_perturbations: 50,
            lipschitz_delta_frac: 0.1,
            seed: 11,
        }
    }
}

/// Settings of `explain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Dataset rows to explain; empty means the first `count` test rows.
    pub samples: Vec<usize>,
    pub count: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            samples: Vec::new(),
            count: 8,
        }
    }
}

/// Everything a run reads. A missing table or key keeps its default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSONL dataset; when absent, `synthetic` is generated in memory.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explainer: ExplainerConfig,
    pub evaluate: EvaluateConfig,
    pub explain: ExplainConfig,
    pub benchmark: NeighborBenchmark,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run configs serialize")
    }
}
