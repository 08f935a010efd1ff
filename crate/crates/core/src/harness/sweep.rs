use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;

use super::config::{ExperimentConfig, SweepGrid};
use super::dataset::{write_text, Dataset};
use super::report::{evaluate_sample, thread_pool};

pub const SWEEP_HEADER: &str = "eta,gamma,T,t,mean_iou,n_samples,n_truncated";

/// Mean IoU at iteration `t` for one `(eta, gamma, T)` setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub iterations: usize,
    pub t: usize,
    pub mean_iou: f64,
    /// Samples that reached iteration `t`.
    pub n_samples: usize,
    /// Samples whose candidate set was truncated in this setting.
    pub n_truncated: usize,
}

/// One row per `(eta, gamma, T, t)` in grid order, `t` innermost.
pub fn run_sweep(config: &ExperimentConfig, dataset: &Dataset, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepRow>> {
    config.validate()?;
    grid.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    let pool = thread_pool(jobs)?;
    let mut rows = Vec::new();
    for &eta in &grid.etas {
        for &gamma in &grid.gammas {
            for &iterations in &grid.iterations {
                let cfg = ExperimentConfig {
                    flow: FlowConfig {
                        eta,
                        gamma,
                        iterations,
                        ..config.flow.clone()
                    },
                    ..config.clone()
                };
                let sample_rows = pool.install(|| {
                    dataset
                        .samples
                        .par_iter()
                        .enumerate()
                        .map(|(i, s)| evaluate_sample(i, s, &cfg))
                        .collect::<Result<Vec<_>>>()
                })?;
                let n_truncated = sample_rows.iter().filter(|r| r.truncated.is_some()).count();
                for t in 0..=iterations {
                    let reached: Vec<f64> = sample_rows.iter().filter_map(|r| r.ious.get(t).copied()).collect();
                    let mean_iou = if reached.is_empty() {
                        f64::NAN
                    } else {
                        reached.iter().sum::<f64>() / reached.len() as f64
                    };
                    rows.push(SweepRow {
                        eta,
                        gamma,
                        iterations,
                        t,
                        mean_iou,
                        n_samples: reached.len(),
                        n_truncated,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.eta, r.gamma, r.iterations, r.t, r.mean_iou, r.n_samples, r.n_truncated
        );
    }
    out
}

pub fn cmd_sweep(
    config: &ExperimentConfig,
    dataset: &Dataset,
    grid: &SweepGrid,
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(config, dataset, grid, jobs)?;
    write_text(out, &sweep_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TaskSpec;

    fn setup(n: usize) -> (ExperimentConfig, Dataset) {
        let cfg = ExperimentConfig {
            num_samples: n,
            task: TaskSpec {
                grid_h: 16,
                grid_w: 16,
                ..TaskSpec::default()
            },
            ..ExperimentConfig::default()
        };
        let ds = Dataset::generate(&cfg.task, n).unwrap();
        (cfg, ds)
    }

    #[test]
    fn row_count_matches_grid() {
        let (cfg, ds) = setup(3);
        let grid = SweepGrid {
            etas: vec![1e-2, 1e-3],
            gammas: vec![0.0, 0.1, 0.2],
            iterations: vec![1, 4],
        };
        let rows = run_sweep(&cfg, &ds, &grid, 2).unwrap();
        assert_eq!(rows.len(), 2 * 3 * (2 + 5));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
        assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
    }

    #[test]
    fn zero_dynamics_sweep_is_flat() {
        let (cfg, ds) = setup(4);
        let grid = SweepGrid {
            etas: vec![0.0],
            gammas: vec![0.0],
            iterations: vec![3],
        };
        let rows = run_sweep(&cfg, &ds, &grid, 1).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_eq!(r.mean_iou, rows[0].mean_iou);
            assert_eq!(r.n_samples, 4);
        }
    }

    #[test]
    fn empty_lists_rejected() {
        let (cfg, ds) = setup(1);
        let grid = SweepGrid {
            etas: vec![],
            ..SweepGrid::default()
        };
        assert!(matches!(run_sweep(&cfg, &ds, &grid, 1), Err(Error::Validation(_))));
    }
}
