use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{generate_sample, Sample, TaskSpec};

use super::config::ExperimentConfig;

pub const DATASET_FORMAT: &str = "flowrefine-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    /// Generator settings; `task.seed` is the seed of the first sample.
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `num_samples` samples with seeds `task.seed + i`.
    pub fn generate(task: &TaskSpec, num_samples: usize) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::Validation("num_samples must be >= 1".into()));
        }
        task.validate()?;
        let samples = (0..num_samples as u64)
            .map(|i| {
                let seed = task.seed.checked_add(i).ok_or_else(|| Error::Validation("sample seed overflows u64".into()))?;
                generate_sample(&task.with_seed(seed))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            format: DATASET_FORMAT.into(),
            task: task.clone(),
            samples,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: Dataset =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing dataset {}", path.display()), e))?;
        if ds.format != DATASET_FORMAT {
            return Err(Error::Validation(format!("unsupported dataset format {:?}", ds.format)));
        }
        if ds.samples.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        for s in &ds.samples {
            s.validate()?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Generate the dataset described by `config` and write it to `out`.
pub fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    config.validate()?;
    let ds = Dataset::generate(&config.task, config.num_samples)?;
    ds.save(out)?;
    Ok(ds)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value).map_err(|e| Error::json(format!("serializing {}", path.display()), e))?;
    text.push('\n');
    write_text(path, &text)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
