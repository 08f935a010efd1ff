use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::refine::SimilarityReduction;
use crate::synth::{EncoderMode, TaskSpec};

/// Grid of flow settings explored by `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub etas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            etas: vec![1e-2, 1e-3, 1e-4, 1e-5],
            gammas: vec![0.1],
            iterations: vec![30],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() || self.gammas.is_empty() || self.iterations.is_empty() {
            return Err(Error::Validation("sweep lists must be non-empty".into()));
        }
        if self.etas.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Validation("sweep etas must be finite and >= 0".into()));
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::Validation("sweep gammas must be finite and >= 0".into()));
        }
        if self.iterations.contains(&0) {
            return Err(Error::Validation("sweep iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One JSON document describing a whole experiment. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub flow: FlowConfig,
    pub decoder: DecoderParams,
    pub num_samples: usize,
    pub similarity_reduction: SimilarityReduction,
    pub encoder: EncoderMode,
    /// Where `run` writes its report when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            flow: FlowConfig::default(),
            decoder: DecoderParams::default(),
            num_samples: 200,
            similarity_reduction: SimilarityReduction::default(),
            encoder: EncoderMode::default(),
            output_path: None,
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing config {}", path.display()), e))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Validation("num_samples must be >= 1".into()));
        }
        self.task.validate()?;
        self.flow.validate_allow_zero_step()?;
        self.decoder.validate()?;
        self.sweep.validate()
    }

    /// Copy with `output_path` cleared, as echoed into reports.
    pub fn echo(&self) -> ExperimentConfig {
        ExperimentConfig {
            output_path: None,
            ..self.clone()
        }
    }
}
