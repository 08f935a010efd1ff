use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::{run_refinement_with, PromptSet, Truncation};
use crate::selection::{select_oracle, select_top1};
use crate::synth::{encode_sample, Sample};

use super::config::ExperimentConfig;
use super::dataset::{write_json, Dataset};

pub const REPORT_FORMAT: &str = "flowrefine-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub t: usize,
    pub score: f64,
    pub degenerate_score: bool,
    pub iou: f64,
    pub prompts: PromptSet,
    /// Row-major run lengths, alternating background/foreground, starting with background.
    pub mask_rle: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub chosen_t: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub seed: u64,
    /// IoU of candidate t for t = 0..; shorter than T+1 when truncated.
    pub ious: Vec<f64>,
    /// Top-1 similarity scores, aligned with `ious`.
    pub scores: Vec<f64>,
    pub top1: Choice,
    pub oracle: Choice,
    pub truncated: Option<Truncation>,
    pub candidates: Vec<CandidateRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_samples: usize,
    pub n_truncated: usize,
    pub baseline_miou: f64,
    pub top1_miou: f64,
    pub oracle_miou: f64,
    pub top1_chosen_t: MeanStd,
    pub oracle_chosen_t: MeanStd,
}

impl Aggregate {
    pub fn from_rows(rows: &[SampleRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::RejectedInput("report has no sample rows".into()));
        }
        let mean = |f: &dyn Fn(&SampleRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let stats = optimal_iteration_stats(rows)?;
        Ok(Aggregate {
            n_samples: rows.len(),
            n_truncated: rows.iter().filter(|r| r.truncated.is_some()).count(),
            baseline_miou: mean(&|r| r.ious[0]),
            top1_miou: mean(&|r| r.top1.iou),
            oracle_miou: mean(&|r| r.oracle.iou),
            top1_chosen_t: stats.top1,
            oracle_chosen_t: stats.oracle,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub per_sample: Vec<SampleRow>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalIterationStats {
    pub top1: MeanStd,
    pub oracle: MeanStd,
}

fn optimal_iteration_stats(rows: &[SampleRow]) -> Result<OptimalIterationStats> {
    let collect = |f: &dyn Fn(&SampleRow) -> usize| rows.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let top1 = MeanStd::of(&collect(&|r| r.top1.chosen_t));
    let oracle = MeanStd::of(&collect(&|r| r.oracle.chosen_t));
    match (top1, oracle) {
        (Some(top1), Some(oracle)) => Ok(OptimalIterationStats { top1, oracle }),
        _ => Err(Error::RejectedInput("report has no sample rows".into())),
    }
}

/// Mean and population std of the chosen iteration per selection mode.
pub fn compute_optimal_iteration_stats(report: &ExperimentReport) -> Result<OptimalIterationStats> {
    optimal_iteration_stats(&report.per_sample)
}

impl ExperimentReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing report {}", path.display()), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Largest absolute difference between stored aggregates and a recomputation from the rows.
    pub fn consistency_gap(&self) -> Result<f64> {
        let fresh = Aggregate::from_rows(&self.per_sample)?;
        let a = &self.aggregate;
        if a.n_samples != fresh.n_samples || a.n_truncated != fresh.n_truncated {
            return Ok(f64::INFINITY);
        }
        let pairs = [
            (a.baseline_miou, fresh.baseline_miou),
            (a.top1_miou, fresh.top1_miou),
            (a.oracle_miou, fresh.oracle_miou),
            (a.top1_chosen_t.mean, fresh.top1_chosen_t.mean),
            (a.top1_chosen_t.std, fresh.top1_chosen_t.std),
            (a.oracle_chosen_t.mean, fresh.oracle_chosen_t.mean),
            (a.oracle_chosen_t.std, fresh.oracle_chosen_t.std),
        ];
        Ok(pairs.iter().map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// Refine, select and score one sample.
pub fn evaluate_sample(index: usize, sample: &Sample, config: &ExperimentConfig) -> Result<SampleRow> {
    let encoded = encode_sample(sample, config.encoder);
    let set = run_refinement_with(&encoded, &config.flow, &config.decoder, config.similarity_reduction)?;
    let top1 = select_top1(&set, &encoded)?;
    let oracle = select_oracle(&set, &encoded.query_gt)?;
    let candidates: Vec<CandidateRow> = set
        .records
        .iter()
        .zip(&oracle.scores)
        .map(|(rec, &iou)| CandidateRow {
            t: rec.t,
            score: rec.score,
            degenerate_score: rec.degenerate_score,
            iou,
            prompts: rec.prompts.clone(),
            mask_rle: rec.mask.to_rle(),
        })
        .collect();
    Ok(SampleRow {
        index,
        seed: sample.seed,
        ious: oracle.scores.clone(),
        scores: top1.scores.clone(),
        top1: Choice {
            chosen_t: top1.chosen_t,
            iou: oracle.scores[top1.chosen_t],
        },
        oracle: Choice {
            chosen_t: oracle.chosen_t,
            iou: oracle.scores[oracle.chosen_t],
        },
        truncated: set.truncated.clone(),
        candidates,
    })
}

pub(crate) fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::Validation("jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {jobs} worker threads: {e}")))
}

/// Evaluate every sample of `dataset` on `jobs` threads. Rows come back in dataset order.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset, jobs: usize) -> Result<ExperimentReport> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Validation("dataset has no samples".into()));
    }
    let pool = thread_pool(jobs)?;
    let rows = pool.install(|| {
        dataset
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| evaluate_sample(i, s, config))
            .collect::<Result<Vec<_>>>()
    })?;
    let aggregate = Aggregate::from_rows(&rows)?;
    Ok(ExperimentReport {
        format: REPORT_FORMAT.into(),
        config: config.echo(),
        per_sample: rows,
        aggregate,
    })
}

/// Run and write the report to `out`.
pub fn cmd_run(config: &ExperimentConfig, dataset: &Dataset, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    let report = run_experiment(config, dataset, jobs)?;
    report.save(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::synth::TaskSpec;

    fn small_config(n: usize) -> ExperimentConfig {
        ExperimentConfig {
            num_samples: n,
            task: TaskSpec {
                grid_h: 16,
                grid_w: 16,
                ..TaskSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn row(top1_t: usize, oracle_t: usize) -> SampleRow {
        SampleRow {
            index: 0,
            seed: 0,
            ious: vec![0.5; 6],
            scores: vec![0.0; 6],
            top1: Choice { chosen_t: top1_t, iou: 0.5 },
            oracle: Choice { chosen_t: oracle_t, iou: 0.5 },
            truncated: None,
            candidates: vec![],
        }
    }

    #[test]
    fn constant_chosen_iteration() {
        let rows: Vec<_> = (0..4).map(|_| row(3, 3)).collect();
        let s = optimal_iteration_stats(&rows).unwrap();
        assert_eq!(s.oracle, MeanStd { mean: 3.0, std: 0.0 });
        assert_eq!(s.top1, MeanStd { mean: 3.0, std: 0.0 });
    }

    #[test]
    fn two_point_chosen_iteration() {
        let rows: Vec<_> = (0..6).map(|i| row(0, if i % 2 == 0 { 0 } else { 5 })).collect();
        let s = optimal_iteration_stats(&rows).unwrap();
        assert_eq!(s.oracle, MeanStd { mean: 2.5, std: 2.5 });
        assert!(optimal_iteration_stats(&[]).is_err());
    }

    #[test]
    fn report_is_self_consistent_and_dominant() {
        let cfg = small_config(12);
        let ds = Dataset::generate(&cfg.task, cfg.num_samples).unwrap();
        let report = run_experiment(&cfg, &ds, 2).unwrap();
        assert_eq!(report.per_sample.len(), 12);
        assert!(report.consistency_gap().unwrap() <= 1e-12);
        let a = &report.aggregate;
        assert!(a.oracle_miou >= a.baseline_miou);
        assert!(a.oracle_miou >= a.top1_miou);
        for (i, r) in report.per_sample.iter().enumerate() {
            assert_eq!(r.index, i);
            assert_eq!(r.seed, i as u64);
            assert!(r.oracle.iou >= r.ious[0]);
            assert_eq!(r.candidates.len(), r.ious.len());
        }
    }

    #[test]
    fn zero_dynamics_collapse_all_modes() {
        let mut cfg = small_config(6);
        cfg.flow = FlowConfig {
            eta: 0.0,
            gamma: 0.0,
            ..FlowConfig::default()
        };
        let ds = Dataset::generate(&cfg.task, cfg.num_samples).unwrap();
        let a = run_experiment(&cfg, &ds, 1).unwrap().aggregate;
        assert_eq!(a.baseline_miou, a.top1_miou);
        assert_eq!(a.baseline_miou, a.oracle_miou);
        assert_eq!(a.oracle_chosen_t, MeanStd { mean: 0.0, std: 0.0 });
    }

    #[test]
    fn thread_count_does_not_change_report() {
        let cfg = small_config(8);
        let ds = Dataset::generate(&cfg.task, cfg.num_samples).unwrap();
        let one = serde_json::to_string(&run_experiment(&cfg, &ds, 1).unwrap()).unwrap();
        let many = serde_json::to_string(&run_experiment(&cfg, &ds, 4).unwrap()).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn tampered_aggregate_is_detected() {
        let cfg = small_config(3);
        let ds = Dataset::generate(&cfg.task, cfg.num_samples).unwrap();
        let mut report = run_experiment(&cfg, &ds, 1).unwrap();
        report.aggregate.oracle_miou += 1e-6;
        assert!(report.consistency_gap().unwrap() > 1e-12);
    }

    #[test]
    fn report_round_trips() {
        let cfg = small_config(2);
        let ds = Dataset::generate(&cfg.task, cfg.num_samples).unwrap();
        let report = run_experiment(&cfg, &ds, 1).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
