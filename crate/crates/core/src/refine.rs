//! Gradient-flow prompt refinement.
//!
//! Starting from the similarity between the support foreground and the query,
//! each iteration nudges the query embedding along the decoder objective's
//! gradient (plus diffusion), recomputes the similarity map from the refined
//! embedding, resamples the top-k prompts and decodes a mask. Masks are always
//! decoded from the original query embedding; the refined embedding only moves
//! the prompts.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    binarize, cosine, decode_logits, grad_refinement_objective, BinaryMask, DecoderParams, EmbeddingGrid,
};
use crate::error::{Error, Result};
use crate::flow::{clip_gradient, euler_maruyama_step, FlowConfig};
use crate::rng;
use crate::selection::{masked_pool, score_candidate};
use crate::synth::{iou, Sample};

/// Distinct, ordered (row, col) prompt points.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct PromptSet {
    points: Vec<(usize, usize)>,
}

impl TryFrom<Vec<(usize, usize)>> for PromptSet {
    type Error = Error;

    fn try_from(points: Vec<(usize, usize)>) -> Result<Self> {
        PromptSet::new(points)
    }
}

impl From<PromptSet> for Vec<(usize, usize)> {
    fn from(p: PromptSet) -> Self {
        p.points
    }
}

impl PromptSet {
    pub fn new(points: Vec<(usize, usize)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("prompt set must not be empty".into()));
        }
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(Error::Contract(format!("duplicate prompt {p:?}")));
            }
        }
        Ok(PromptSet { points })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.points.iter().all(|&(r, c)| r < height && c < width)
    }
}

/// Per-query-pixel cosine similarity to the support foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Contract("similarity map size mismatch".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && (-1.0..=1.0).contains(*v))) {
            return Err(Error::NumericalOverflow(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// How support foreground pixels are reduced into one score per query pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityReduction {
    /// Cosine against the mean support foreground embedding.
    #[default]
    MeanPrototype,
    /// Maximum cosine over individual support foreground pixels.
    MaxOverSupport,
}

/// Support-side state reused across iterations.
#[derive(Debug, Clone)]
pub struct SupportContext {
    reduction: SimilarityReduction,
    channels: usize,
    prototype: Vec<f64>,
    foreground: Vec<Vec<f64>>,
}

impl SupportContext {
    pub fn new(support: &EmbeddingGrid, support_mask: &BinaryMask, reduction: SimilarityReduction) -> Result<Self> {
        if support.height() != support_mask.height() || support.width() != support_mask.width() {
            return Err(Error::Contract("support mask shape does not match support grid".into()));
        }
        if support_mask.is_empty() {
            return Err(Error::Contract("support mask is empty".into()));
        }
        let foreground: Vec<Vec<f64>> = support_mask
            .coordinates()
            .map(|(r, c)| support.pixel(r, c).to_vec())
            .collect();
        let (prototype, _) = masked_pool(support, support_mask)?;
        Ok(SupportContext {
            reduction,
            channels: support.channels(),
            prototype,
            foreground,
        })
    }

    pub fn similarity(&self, query: &EmbeddingGrid) -> Result<SimilarityMap> {
        if query.channels() != self.channels {
            return Err(Error::Contract(format!(
                "query has {} channels, support has {}",
                query.channels(),
                self.channels
            )));
        }
        let values = (0..query.pixel_count())
            .map(|j| {
                let q = query.pixel_at(j);
                match self.reduction {
                    SimilarityReduction::MeanPrototype => cosine(q, &self.prototype),
                    SimilarityReduction::MaxOverSupport => self
                        .foreground
                        .iter()
                        .map(|s| cosine(q, s))
                        .fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        SimilarityMap::new(query.height(), query.width(), values)
    }
}

pub fn similarity_map(
    z_support: &EmbeddingGrid,
    support_mask: &BinaryMask,
    z_query: &EmbeddingGrid,
    reduction: SimilarityReduction,
) -> Result<SimilarityMap> {
    SupportContext::new(z_support, support_mask, reduction)?.similarity(z_query)
}

/// Top-k coordinates by similarity, ties broken in row-major order.
pub fn sample_prompts(sim: &SimilarityMap, k: usize) -> Result<PromptSet> {
    let n = sim.values.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("cannot sample {k} prompts from {n} pixels")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps row-major order among equal similarities.
    order.sort_by(|&a, &b| sim.values[b].total_cmp(&sim.values[a]));
    let points = order[..k].iter().map(|&j| (j / sim.width, j % sim.width)).collect();
    PromptSet::new(points)
}

#[derive(Debug, Clone)]
pub struct RefineState {
    pub embedding: EmbeddingGrid,
    pub prompts: PromptSet,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub embedding: EmbeddingGrid,
    pub similarity: SimilarityMap,
    pub prompts: PromptSet,
    pub mask: BinaryMask,
}

/// One refinement iteration with caller-supplied noise ξ_t.
pub fn refine_once(
    state: &RefineState,
    z0_query: &EmbeddingGrid,
    support: &SupportContext,
    cfg: &FlowConfig,
    params: &DecoderParams,
    noise: &[f64],
) -> Result<StepOutput> {
    if !state.embedding.same_shape(z0_query) {
        return Err(Error::Contract("refined and original query grids differ in shape".into()));
    }
    let grad = grad_refinement_objective(&state.embedding, &state.prompts, params)?;
    let grad = match cfg.clip_norm {
        Some(c) => clip_gradient(&grad, c),
        None => grad,
    };
    let moved = euler_maruyama_step(state.embedding.data(), &grad, cfg.eta, cfg.gamma, noise)?;
    let embedding = state.embedding.with_data(moved)?;
    let similarity = support.similarity(&embedding)?;
    let prompts = sample_prompts(&similarity, cfg.prompt_count)?;
    let mask = decode_mask(z0_query, &prompts, params)?;
    Ok(StepOutput {
        embedding,
        similarity,
        prompts,
        mask,
    })
}

pub fn decode_mask(z0_query: &EmbeddingGrid, prompts: &PromptSet, params: &DecoderParams) -> Result<BinaryMask> {
    Ok(binarize(&decode_logits(z0_query, prompts, params)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub t: usize,
    pub mask: BinaryMask,
    pub score: f64,
    /// Set when the score fell back to -1 (empty mask or zero pooled vectors).
    pub degenerate_score: bool,
    pub prompts: PromptSet,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// Iteration whose computation failed; records stop at `iteration - 1`.
    pub iteration: usize,
    pub reason: String,
}

/// Candidate masks for t = 0..=T, t = 0 being the unrefined baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub records: Vec<CandidateRecord>,
    pub truncated: Option<Truncation>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn baseline(&self) -> &CandidateRecord {
        &self.records[0]
    }
}

pub fn run_refinement(sample: &Sample, cfg: &FlowConfig, params: &DecoderParams) -> Result<CandidateSet> {
    run_refinement_with(sample, cfg, params, SimilarityReduction::default())
}

/// Run the full refinement loop. Errors before the baseline record exists are
/// returned; later failures truncate the candidate set instead.
pub fn run_refinement_with(
    sample: &Sample,
    cfg: &FlowConfig,
    params: &DecoderParams,
    reduction: SimilarityReduction,
) -> Result<CandidateSet> {
    cfg.validate_allow_zero_step()?;
    params.validate()?;
    sample.validate()?;
    let support = SupportContext::new(&sample.support, &sample.support_mask, reduction)?;
    let (support_repr, _) = masked_pool(&sample.support, &sample.support_mask)?;
    let z0 = &sample.query;

    let record = |t: usize, mask: BinaryMask, prompts: PromptSet| -> Result<CandidateRecord> {
        let (query_repr, empty) = masked_pool(z0, &mask)?;
        let (score, degenerate) = if empty { (-1.0, true) } else { score_candidate(&support_repr, &query_repr)? };
        let iou = Some(iou(&mask, &sample.query_gt)?);
        Ok(CandidateRecord {
            t,
            mask,
            score,
            degenerate_score: degenerate || empty,
            prompts,
            iou,
        })
    };

    let s0 = support.similarity(z0)?;
    let p0 = sample_prompts(&s0, cfg.prompt_count)?;
    let m0 = decode_mask(z0, &p0, params)?;
    let mut records = vec![record(0, m0, p0.clone())?];

    let mut state = RefineState {
        embedding: z0.clone(),
        prompts: p0,
    };
    let mut truncated = None;
    for t in 0..cfg.iterations {
        let noise = rng::refinement_noise(cfg.seed, sample.seed, t as u64, z0.data().len());
        let step = refine_once(&state, z0, &support, cfg, params, &noise)
            .and_then(|out| Ok((record(t + 1, out.mask.clone(), out.prompts.clone())?, out)));
        match step {
            Ok((rec, out)) => {
                records.push(rec);
                state = RefineState {
                    embedding: out.embedding,
                    prompts: out.prompts,
                };
            }
            Err(e) => {
                truncated = Some(Truncation {
                    iteration: t + 1,
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    Ok(CandidateSet { records, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::prototype_from_prompts;
    use crate::synth::{generate_sample, TaskSpec};

    fn sim(h: usize, w: usize, v: Vec<f64>) -> SimilarityMap {
        SimilarityMap::new(h, w, v).unwrap()
    }

    #[test]
    fn prompt_set_contract() {
        assert!(PromptSet::new(vec![]).is_err());
        assert!(PromptSet::new(vec![(0, 1), (0, 1)]).is_err());
        let p = PromptSet::new(vec![(2, 1), (0, 0)]).unwrap();
        assert!(p.within(3, 2));
        assert!(!p.within(2, 2));
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, "[[2,1],[0,0]]");
        assert!(serde_json::from_str::<PromptSet>("[[1,1],[1,1]]").is_err());
    }

    #[test]
    fn similarity_examples() {
        // Support foreground: u = (1,0,0) at (0,0), w = (0,1,0) at (0,1).
        let support = EmbeddingGrid::new(1, 3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let mask = BinaryMask::new(1, 3, vec![true, true, false]).unwrap();
        // Query pixels: u, (0,0,1) orthogonal to both, and the mean prototype itself.
        let query = EmbeddingGrid::new(1, 3, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.5, 0.5, 0.0]).unwrap();
        let mean = similarity_map(&support, &mask, &query, SimilarityReduction::MeanPrototype).unwrap();
        let max = similarity_map(&support, &mask, &query, SimilarityReduction::MaxOverSupport).unwrap();
        // cos(u, (u + w)/2) = 1/sqrt(2).
        assert!((mean.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(max.get(0, 0), 1.0);
        assert_eq!(mean.get(0, 1), 0.0);
        assert_eq!(max.get(0, 1), 0.0);
        assert!((mean.get(0, 2) - 1.0).abs() < 1e-12);
        let empty = BinaryMask::empty(1, 3);
        assert!(matches!(
            similarity_map(&support, &empty, &query, SimilarityReduction::MeanPrototype),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn top_k_examples() {
        let mut v = vec![0.0; 12];
        v[5] = 0.7;
        assert_eq!(sample_prompts(&sim(3, 4, v), 1).unwrap().points(), &[(1, 1)]);
        assert_eq!(
            sample_prompts(&sim(3, 4, vec![0.3; 12]), 3).unwrap().points(),
            &[(0, 0), (0, 1), (0, 2)]
        );
        let mut v = vec![0.0; 12];
        v[0] = 0.9;
        v[2 * 4 + 1] = 0.8;
        v[4 + 3] = 0.8;
        assert_eq!(sample_prompts(&sim(3, 4, v), 2).unwrap().points(), &[(0, 0), (1, 3)]);
        assert!(sample_prompts(&sim(1, 2, vec![0.0; 2]), 3).is_err());
    }

    fn fixture_8x8() -> (Sample, FlowConfig) {
        // Noise-free 8×8 task whose initial top-k includes one background pixel.
        let spec = TaskSpec {
            grid_h: 8,
            grid_w: 8,
            channels: 4,
            object_area_fraction: 0.1,
            feature_noise_sigma: 0.0,
            semantic_gap: 0.0,
            distractor_count: 1,
            seed: 2,
            ..TaskSpec::default()
        };
        let sample = generate_sample(&spec).unwrap();
        let k = sample.query_gt.count() + 1;
        let cfg = FlowConfig {
            eta: 0.001,
            gamma: 0.0,
            iterations: 1,
            prompt_count: k,
            ..FlowConfig::default()
        };
        (sample, cfg)
    }

    #[test]
    fn single_step_matches_hand_trace() {
        let (sample, cfg) = fixture_8x8();
        let params = DecoderParams::default();
        let support = SupportContext::new(&sample.support, &sample.support_mask, SimilarityReduction::MeanPrototype).unwrap();
        let s0 = support.similarity(&sample.query).unwrap();
        let p0 = sample_prompts(&s0, cfg.prompt_count).unwrap();
        let background_prompts = p0.points().iter().filter(|&&(r, c)| !sample.query_gt.get(r, c)).count();
        assert_eq!(background_prompts, 1);

        // Hand trace: gradient, clip, γ = 0 ascent, similarity, top-k, decode from z0.
        let g = grad_refinement_objective(&sample.query, &p0, &params).unwrap();
        let g = clip_gradient(&g, 1.0);
        let moved: Vec<f64> = sample.query.data().iter().zip(g.values()).map(|(x, d)| x + 0.001 * d).collect();
        let z1 = sample.query.with_data(moved).unwrap();
        let s1 = support.similarity(&z1).unwrap();
        let p1 = sample_prompts(&s1, cfg.prompt_count).unwrap();
        let m1 = binarize(&decode_logits(&sample.query, &p1, &params).unwrap());

        let state = RefineState {
            embedding: sample.query.clone(),
            prompts: p0,
        };
        let noise = vec![0.0; sample.query.data().len()];
        let out = refine_once(&state, &sample.query, &support, &cfg, &params, &noise).unwrap();
        assert_eq!(out.embedding, z1);
        assert_eq!(out.similarity, s1);
        assert_eq!(out.prompts, p1);
        assert_eq!(out.mask, m1);
    }

    #[test]
    fn zero_dynamics_is_a_fixed_point() {
        let sample = generate_sample(&TaskSpec::default()).unwrap();
        let params = DecoderParams::default();
        let cfg = FlowConfig {
            eta: 0.0,
            gamma: 0.0,
            ..FlowConfig::default()
        };
        let support = SupportContext::new(&sample.support, &sample.support_mask, SimilarityReduction::MeanPrototype).unwrap();
        let s0 = support.similarity(&sample.query).unwrap();
        let p0 = sample_prompts(&s0, cfg.prompt_count).unwrap();
        let m0 = decode_mask(&sample.query, &p0, &params).unwrap();
        let state = RefineState {
            embedding: sample.query.clone(),
            prompts: p0.clone(),
        };
        let noise = rng::refinement_noise(1, 2, 3, sample.query.data().len());
        let out = refine_once(&state, &sample.query, &support, &cfg, &params, &noise).unwrap();
        assert_eq!(out.embedding, sample.query);
        assert_eq!(out.similarity, s0);
        assert_eq!(out.prompts, p0);
        assert_eq!(out.mask, m0);

        let set = run_refinement(&sample, &FlowConfig { iterations: 3, ..cfg }, &params).unwrap();
        assert_eq!(set.len(), 4);
        for r in &set.records {
            assert_eq!(r.mask, set.records[0].mask);
            assert_eq!(r.score.to_bits(), set.records[0].score.to_bits());
        }
    }

    #[test]
    fn mask_is_decoded_from_original_embedding() {
        let sample = generate_sample(&TaskSpec { seed: 5, ..TaskSpec::default() }).unwrap();
        let params = DecoderParams::default();
        let cfg = FlowConfig { eta: 0.01, ..FlowConfig::default() };
        let support = SupportContext::new(&sample.support, &sample.support_mask, SimilarityReduction::MeanPrototype).unwrap();
        let p0 = sample_prompts(&support.similarity(&sample.query).unwrap(), cfg.prompt_count).unwrap();
        let state = RefineState { embedding: sample.query.clone(), prompts: p0 };
        let noise = rng::refinement_noise(0, 5, 0, sample.query.data().len());
        let out = refine_once(&state, &sample.query, &support, &cfg, &params, &noise).unwrap();
        // The mask depends on z0 and the prompts only: swapping the refined
        // embedding for garbage after resampling leaves it unchanged, while
        // decoding from the garbage itself would not.
        assert_eq!(out.mask, decode_mask(&sample.query, &out.prompts, &params).unwrap());
        let garbage = sample.support.clone();
        assert_ne!(out.mask, decode_mask(&garbage, &out.prompts, &params).unwrap());
    }

    #[test]
    fn default_run_has_six_records() {
        let sample = generate_sample(&TaskSpec::default()).unwrap();
        let set = run_refinement(&sample, &FlowConfig::default(), &DecoderParams::default()).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set.truncated.is_none());
        for (t, r) in set.records.iter().enumerate() {
            assert_eq!(r.t, t);
            assert!(r.prompts.len() == 8);
            let unique: HashSet<_> = r.prompts.points().iter().collect();
            assert_eq!(unique.len(), r.prompts.len());
            assert_eq!(r.mask, decode_mask(&sample.query, &r.prompts, &DecoderParams::default()).unwrap());
        }
    }

    #[test]
    fn noise_free_on_object_prompts_is_perfect() {
        for seed in 0..5 {
            let sample = generate_sample(&TaskSpec {
                seed,
                semantic_gap: 0.0,
                feature_noise_sigma: 0.0,
                ..TaskSpec::default()
            })
            .unwrap();
            let set = run_refinement(&sample, &FlowConfig::default(), &DecoderParams::default()).unwrap();
            for r in &set.records {
                assert!(r.prompts.points().iter().all(|&(row, col)| sample.query_gt.get(row, col)));
                assert_eq!(r.iou, Some(1.0), "seed {seed}, t {}", r.t);
            }
        }
    }

    #[test]
    fn run_is_deterministic() {
        let sample = generate_sample(&TaskSpec { seed: 8, ..TaskSpec::default() }).unwrap();
        let cfg = FlowConfig { eta: 0.01, seed: 3, ..FlowConfig::default() };
        let a = run_refinement(&sample, &cfg, &DecoderParams::default()).unwrap();
        let b = run_refinement(&sample, &cfg, &DecoderParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergent_step_truncates() {
        let sample = generate_sample(&TaskSpec::default()).unwrap();
        let cfg = FlowConfig {
            eta: 1e300,
            gamma: 1e10,
            clip_norm: None,
            ..FlowConfig::default()
        };
        let set = run_refinement(&sample, &cfg, &DecoderParams::default()).unwrap();
        let trunc = set.truncated.clone().expect("overflowing step must truncate");
        assert_eq!(trunc.iteration, 1);
        assert_eq!(set.len(), 1);
        assert_eq!(set.baseline().t, 0);
    }

    #[test]
    fn max_reduction_runs() {
        let sample = generate_sample(&TaskSpec::default()).unwrap();
        let set = run_refinement_with(
            &sample,
            &FlowConfig::default(),
            &DecoderParams::default(),
            SimilarityReduction::MaxOverSupport,
        )
        .unwrap();
        assert_eq!(set.len(), 6);
        let proto = prototype_from_prompts(&sample.query, &set.baseline().prompts).unwrap();
        assert_eq!(proto.len(), sample.query.channels());
    }
}
