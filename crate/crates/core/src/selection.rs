//! Candidate scoring and top-1 / oracle mask selection.

use serde::{Deserialize, Serialize};

use crate::decoder::{cosine, BinaryMask, EmbeddingGrid};
use crate::error::{Error, Result};
use crate::refine::CandidateSet;
use crate::synth::{iou, Sample};

/// Mean embedding over the mask's pixels. The flag is set (and the zero
/// vector returned) when the mask is empty.
pub fn masked_pool(z: &EmbeddingGrid, mask: &BinaryMask) -> Result<(Vec<f64>, bool)> {
    if z.height() != mask.height() || z.width() != mask.width() {
        return Err(Error::Contract(format!(
            "mask {}x{} does not match grid {}x{}",
            mask.height(),
            mask.width(),
            z.height(),
            z.width()
        )));
    }
    let mut acc = vec![0.0; z.channels()];
    let mut n = 0usize;
    for (r, c) in mask.coordinates() {
        n += 1;
        for (a, x) in acc.iter_mut().zip(z.pixel(r, c)) {
            *a += x;
        }
    }
    if n == 0 {
        return Ok((acc, true));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok((acc, false))
}

/// Cosine similarity of the pooled representations. Two zero vectors give the
/// degenerate score -1 with the flag set.
pub fn score_candidate(support_repr: &[f64], query_repr: &[f64]) -> Result<(f64, bool)> {
    if support_repr.len() != query_repr.len() {
        return Err(Error::Contract(format!(
            "representation lengths differ: {} vs {}",
            support_repr.len(),
            query_repr.len()
        )));
    }
    let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    if zero(support_repr) && zero(query_repr) {
        return Ok((-1.0, true));
    }
    Ok((cosine(support_repr, query_repr), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Top1,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mode: SelectionMode,
    pub chosen_t: usize,
    pub chosen_mask: BinaryMask,
    /// Per-candidate criterion: similarity for top-1, IoU for oracle.
    pub scores: Vec<f64>,
}

/// First index of the maximum; earlier candidates win ties.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn build(mode: SelectionMode, candidates: &CandidateSet, scores: Vec<f64>) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::Contract("candidate set is empty".into()));
    }
    let chosen_t = argmax_first(&scores);
    Ok(SelectionResult {
        mode,
        chosen_t: candidates.records[chosen_t].t,
        chosen_mask: candidates.records[chosen_t].mask.clone(),
        scores,
    })
}

/// Pick the candidate whose pooled query embedding is most similar to the pooled support.
pub fn select_top1(candidates: &CandidateSet, sample: &Sample) -> Result<SelectionResult> {
    let (support_repr, _) = masked_pool(&sample.support, &sample.support_mask)?;
    let scores = candidates
        .records
        .iter()
        .map(|rec| {
            let (query_repr, empty) = masked_pool(&sample.query, &rec.mask)?;
            if empty {
                return Ok(-1.0);
            }
            Ok(score_candidate(&support_repr, &query_repr)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    build(SelectionMode::Top1, candidates, scores)
}

/// Pick the candidate with the highest IoU against ground truth.
pub fn select_oracle(candidates: &CandidateSet, gt: &BinaryMask) -> Result<SelectionResult> {
    let scores = candidates
        .records
        .iter()
        .map(|rec| iou(&rec.mask, gt))
        .collect::<Result<Vec<f64>>>()?;
    build(SelectionMode::Oracle, candidates, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderParams;
    use crate::flow::FlowConfig;
    use crate::refine::{run_refinement, CandidateRecord, PromptSet};
    use crate::synth::{generate_sample, TaskSpec};

    fn candidates(masks: Vec<BinaryMask>) -> CandidateSet {
        CandidateSet {
            records: masks
                .into_iter()
                .enumerate()
                .map(|(t, mask)| CandidateRecord {
                    t,
                    mask,
                    score: 0.0,
                    degenerate_score: false,
                    prompts: PromptSet::new(vec![(0, 0)]).unwrap(),
                    iou: None,
                })
                .collect(),
            truncated: None,
        }
    }

    #[test]
    fn pooling_examples() {
        let z = EmbeddingGrid::new(1, 3, 2, vec![1.0, 0.0, 3.0, 2.0, 9.0, 9.0]).unwrap();
        let single = BinaryMask::new(1, 3, vec![false, true, false]).unwrap();
        assert_eq!(masked_pool(&z, &single).unwrap(), (vec![3.0, 2.0], false));
        let pair = BinaryMask::new(1, 3, vec![true, true, false]).unwrap();
        assert_eq!(masked_pool(&z, &pair).unwrap(), (vec![2.0, 1.0], false));
        let constant = EmbeddingGrid::from_fn(3, 3, 2, |_, _| vec![0.5, -1.0]).unwrap();
        let m = BinaryMask::from_fn(3, 3, |r, c| r != c);
        assert_eq!(masked_pool(&constant, &m).unwrap().0, vec![0.5, -1.0]);
        assert_eq!(masked_pool(&z, &BinaryMask::empty(1, 3)).unwrap(), (vec![0.0, 0.0], true));
        assert!(masked_pool(&z, &BinaryMask::empty(3, 1)).is_err());
    }

    #[test]
    fn scoring_examples() {
        assert!((score_candidate(&[0.3, 0.4], &[0.3, 0.4]).unwrap().0 - 1.0).abs() < 1e-15);
        assert_eq!(score_candidate(&[1.0, 0.0], &[0.0, 2.0]).unwrap().0, 0.0);
        let (s, flag) = score_candidate(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((s - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert!(!flag);
        assert_eq!(score_candidate(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), (-1.0, true));
        assert!(score_candidate(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn argmax_ties_prefer_earliest() {
        assert_eq!(argmax_first(&[0.3, 0.9, 0.5]), 1);
        assert_eq!(argmax_first(&[0.4, 0.4, 0.7]), 2);
        assert_eq!(argmax_first(&[0.2, 0.2, 0.2]), 0);
    }

    #[test]
    fn top1_with_identical_candidates_picks_baseline() {
        let sample = generate_sample(&TaskSpec::default()).unwrap();
        let set = candidates(vec![sample.query_gt.clone(); 4]);
        let sel = select_top1(&set, &sample).unwrap();
        assert_eq!(sel.chosen_t, 0);
        assert_eq!(sel.mode, SelectionMode::Top1);
    }

    #[test]
    fn ground_truth_candidate_scores_highest() {
        for seed in 0..5 {
            let sample = generate_sample(&TaskSpec {
                seed,
                semantic_gap: 0.0,
                feature_noise_sigma: 0.0,
                ..TaskSpec::default()
            })
            .unwrap();
            let gt = sample.query_gt.clone();
            let coords: Vec<_> = gt.coordinates().collect();
            let mut half = BinaryMask::empty(gt.height(), gt.width());
            coords.iter().step_by(2).for_each(|&(r, c)| half.set(r, c, true));
            let mut single = BinaryMask::empty(gt.height(), gt.width());
            single.set(coords[0].0, coords[0].1, true);
            // A superset leaking into the background must lose too.
            let mut leaky = gt.clone();
            let bg = (0..gt.height() * gt.width()).find(|&j| !gt.values()[j]).unwrap();
            leaky.set(bg / gt.width(), bg % gt.width(), true);
            let set = candidates(vec![leaky, half, BinaryMask::empty(gt.height(), gt.width()), gt.clone(), single]);
            let sel = select_top1(&set, &sample).unwrap();
            // Subsets of a noise-free object pool to the same feature and tie.
            let best = sel.scores.iter().cloned().fold(f64::MIN, f64::max);
            assert!(sel.scores[3] >= best - 1e-12);
            assert!(sel.scores[0] < sel.scores[3]);
            assert_eq!(sel.scores[2], -1.0);
        }
    }

    #[test]
    fn oracle_examples() {
        let gt = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let partial = BinaryMask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let set = candidates(vec![partial.clone(), gt.clone(), partial.clone()]);
        let sel = select_oracle(&set, &gt).unwrap();
        assert_eq!(sel.chosen_t, 1);
        assert_eq!(sel.scores[1], 1.0);

        let empty = candidates(vec![BinaryMask::empty(4, 4); 3]);
        let sel = select_oracle(&empty, &gt).unwrap();
        assert_eq!(sel.chosen_t, 0);
        assert_eq!(sel.scores[0], 0.0);

        // IoUs 0.4, 0.4, 0.7 over a 10-pixel ground truth.
        let gt = BinaryMask::from_fn(2, 10, |r, _| r == 0);
        let four = BinaryMask::from_fn(2, 10, |r, c| r == 0 && c < 4);
        let seven = BinaryMask::from_fn(2, 10, |r, c| r == 0 && c < 7);
        let sel = select_oracle(&candidates(vec![four.clone(), four, seven]), &gt).unwrap();
        assert_eq!(sel.chosen_t, 2);
        assert!((sel.scores[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn selection_invariants_on_refined_runs() {
        let params = DecoderParams::default();
        let cfg = FlowConfig { eta: 0.01, ..FlowConfig::default() };
        for seed in 0..10 {
            let sample = generate_sample(&TaskSpec { seed, semantic_gap: 0.5, ..TaskSpec::default() }).unwrap();
            let set = run_refinement(&sample, &cfg, &params).unwrap();
            let top1 = select_top1(&set, &sample).unwrap();
            let oracle = select_oracle(&set, &sample.query_gt).unwrap();
            let base_iou = iou(&set.baseline().mask, &sample.query_gt).unwrap();
            let top1_iou = iou(&top1.chosen_mask, &sample.query_gt).unwrap();
            let oracle_iou = iou(&oracle.chosen_mask, &sample.query_gt).unwrap();
            assert!(oracle_iou >= base_iou);
            assert!(oracle_iou >= top1_iou);
            // Stored scores agree with a fresh top-1 computation.
            for (rec, s) in set.records.iter().zip(&top1.scores) {
                assert_eq!(rec.score.to_bits(), s.to_bits());
            }
            // Positive rescaling of the embeddings does not move the argmax.
            let scaled = Sample {
                support: sample.support.scaled(3.5),
                query: sample.query.scaled(0.2),
                ..sample.clone()
            };
            assert_eq!(select_top1(&set, &scaled).unwrap().chosen_t, top1.chosen_t);
            assert_eq!(select_top1(&set, &sample).unwrap(), top1);
        }
    }
}
