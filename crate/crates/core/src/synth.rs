//! Synthetic one-shot segmentation tasks.
//!
//! Each sample is a support/query pair of embedding grids. Object pixels carry
//! a unit-norm class prototype, background pixels carry one of several
//! background prototypes laid out as Voronoi regions, and every pixel gets
//! isotropic Gaussian feature noise. The query object prototype is the support
//! prototype rotated by `(π/2)·semantic_gap` inside the plane it spans with a
//! random orthogonal direction, so the support/query prototype cosine is
//! exactly `cos((π/2)·semantic_gap)`.
//!
//! Background prototypes are orthogonal to that plane apart from a bounded
//! component along the support prototype, keeping their cosine with either
//! object prototype strictly below the default decoder threshold of 0.5.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{BinaryMask, EmbeddingGrid};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Rectangle,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub object_kind: ObjectKind,
    pub object_area_fraction: f64,
    pub feature_noise_sigma: f64,
    /// 0 = identical support/query prototypes, 1 = orthogonal.
    pub semantic_gap: f64,
    /// Look-alike background regions in addition to the plain background.
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            grid_h: 32,
            grid_w: 32,
            channels: 8,
            object_kind: ObjectKind::Blob,
            object_area_fraction: 0.15,
            feature_noise_sigma: 0.1,
            semantic_gap: 0.2,
            distractor_count: 2,
            seed: 0,
        }
    }
}

/// Cosine range of the plain background against the support prototype.
const PLAIN_BACKGROUND_COS: (f64, f64) = (-0.2, 0.2);
/// Cosine range of look-alike distractors; the upper end stays below 0.5.
const DISTRACTOR_COS: (f64, f64) = (0.25, 0.45);

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        if self.channels < 4 {
            return Err(Error::Validation(format!(
                "need at least 4 channels to embed the prototype geometry, got {}",
                self.channels
            )));
        }
        if !(self.object_area_fraction > 0.0 && self.object_area_fraction <= 0.5) {
            return Err(Error::Validation(format!(
                "object_area_fraction must lie in (0, 0.5], got {}",
                self.object_area_fraction
            )));
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return Err(Error::Validation("feature_noise_sigma must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.semantic_gap) {
            return Err(Error::Validation(format!(
                "semantic_gap must lie in [0, 1], got {}",
                self.semantic_gap
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            seed,
            ..self.clone()
        }
    }
}

/// A support/query pair with masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Generator seed; also keys the sample's refinement noise stream.
    pub seed: u64,
    pub support: EmbeddingGrid,
    pub support_mask: BinaryMask,
    pub query: EmbeddingGrid,
    pub query_gt: BinaryMask,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let shape_ok = |z: &EmbeddingGrid, m: &BinaryMask| z.height() == m.height() && z.width() == m.width();
        if !shape_ok(&self.support, &self.support_mask) || !shape_ok(&self.query, &self.query_gt) {
            return Err(Error::Contract("mask shape does not match its grid".into()));
        }
        if self.support.channels() != self.query.channels() {
            return Err(Error::Contract("support and query channel counts differ".into()));
        }
        for (name, m) in [("support_mask", &self.support_mask), ("query_gt", &self.query_gt)] {
            if m.is_empty() || m.is_full() {
                return Err(Error::Contract(format!("{name} must be neither empty nor full")));
            }
        }
        Ok(())
    }
}

/// Unit prototypes shared by the support and query images of a sample.
#[derive(Debug, Clone)]
pub struct Prototypes {
    pub support_object: Vec<f64>,
    pub query_object: Vec<f64>,
    /// Plain background first, then look-alike distractors.
    pub background: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in basis {
            let d: f64 = v.iter().zip(*b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(*b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Rotate `u` toward the orthonormal direction `w` by `angle` (a Givens rotation in span{u, w}).
pub fn givens_rotate(u: &[f64], w: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out: Vec<f64> = u.iter().zip(w).map(|(a, b)| c * a + s * b).collect();
    normalize(&mut out);
    out
}

fn draw_prototypes(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Prototypes {
    let dim = spec.channels;
    let mut support_object: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut support_object);
    let rotation_dir = random_orthogonal(rng, dim, &[&support_object]);
    let query_object = givens_rotate(&support_object, &rotation_dir, FRAC_PI_2 * spec.semantic_gap);

    let mut background = Vec::with_capacity(spec.distractor_count + 1);
    for i in 0..=spec.distractor_count {
        let (lo, hi) = if i == 0 { PLAIN_BACKGROUND_COS } else { DISTRACTOR_COS };
        let c = rng.random_range(lo..hi);
        let residual = random_orthogonal(rng, dim, &[&support_object, &rotation_dir]);
        let s = (1.0 - c * c).sqrt();
        background.push(
            support_object
                .iter()
                .zip(&residual)
                .map(|(a, r)| c * a + s * r)
                .collect(),
        );
    }
    Prototypes {
        support_object,
        query_object,
        background,
    }
}

fn draw_object_mask(rng: &mut ChaCha8Rng, spec: &TaskSpec) -> Result<BinaryMask> {
    let (h, w) = (spec.grid_h as f64, spec.grid_w as f64);
    let area = spec.object_area_fraction * h * w;
    let mask = match spec.object_kind {
        ObjectKind::Rectangle => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rh = (area / aspect).sqrt().round().max(1.0) as usize;
            let rw = (area / rh as f64).round().max(1.0) as usize;
            if rh > spec.grid_h || rw > spec.grid_w {
                return Err(Error::Generation(format!(
                    "{rh}x{rw} rectangle does not fit a {}x{} grid",
                    spec.grid_h, spec.grid_w
                )));
            }
            let top = rng.random_range(0..=spec.grid_h - rh);
            let left = rng.random_range(0..=spec.grid_w - rw);
            BinaryMask::from_fn(spec.grid_h, spec.grid_w, |r, c| {
                (top..top + rh).contains(&r) && (left..left + rw).contains(&c)
            })
        }
        ObjectKind::Blob => {
            let radius = (area / PI).sqrt();
            let (a1, a2) = (rng.random_range(0.0..0.2), rng.random_range(0.0..0.1));
            let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            let reach = radius * (1.0 + a1 + a2);
            if 2.0 * reach + 1.0 > h.min(w) {
                return Err(Error::Generation(format!(
                    "blob of radius {reach:.2} does not fit a {}x{} grid",
                    spec.grid_h, spec.grid_w
                )));
            }
            let cy = rng.random_range(reach..=(h - 1.0 - reach));
            let cx = rng.random_range(reach..=(w - 1.0 - reach));
            BinaryMask::from_fn(spec.grid_h, spec.grid_w, |r, c| {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let phi = dy.atan2(dx);
                let boundary = radius * (1.0 + a1 * (3.0 * phi + p1).sin() + a2 * (5.0 * phi + p2).sin());
                (dy * dy + dx * dx).sqrt() <= boundary
            })
        }
    };
    if mask.is_empty() || mask.is_full() {
        return Err(Error::Generation(format!(
            "object mask covers {} of {} pixels",
            mask.count(),
            spec.grid_h * spec.grid_w
        )));
    }
    Ok(mask)
}

fn render(
    rng: &mut ChaCha8Rng,
    spec: &TaskSpec,
    object: &[f64],
    background: &[Vec<f64>],
) -> Result<(EmbeddingGrid, BinaryMask)> {
    let mask = draw_object_mask(rng, spec)?;
    let sites: Vec<(f64, f64)> = (0..background.len())
        .map(|_| {
            (
                rng.random_range(0.0..spec.grid_h as f64),
                rng.random_range(0.0..spec.grid_w as f64),
            )
        })
        .collect();
    let sigma = spec.feature_noise_sigma;
    let grid = EmbeddingGrid::from_fn(spec.grid_h, spec.grid_w, spec.channels, |r, c| {
        let base = if mask.get(r, c) {
            object
        } else {
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (sy - r as f64).powi(2) + (sx - c as f64).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            &background[nearest]
        };
        base.iter()
            .map(|&x| {
                let n: f64 = rng.sample(StandardNormal);
                x + sigma * n
            })
            .collect()
    })?;
    Ok((grid, mask))
}

/// Draw the prototypes a spec's seed produces, without rendering grids.
pub fn sample_prototypes(spec: &TaskSpec) -> Result<Prototypes> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Domain::Synthesis, 0, 0);
    Ok(draw_prototypes(&mut rng, spec))
}

pub fn generate_sample(spec: &TaskSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Domain::Synthesis, 0, 0);
    let protos = draw_prototypes(&mut rng, spec);
    let (support, support_mask) = render(&mut rng, spec, &protos.support_object, &protos.background)?;
    let (query, query_gt) = render(&mut rng, spec, &protos.query_object, &protos.background)?;
    let sample = Sample {
        seed: spec.seed,
        support,
        support_mask,
        query,
        query_gt,
    };
    sample.validate()?;
    Ok(sample)
}

/// Image encoder applied to raw grids before refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    Identity,
    /// Per-channel 3×3 mean over the in-bounds neighbourhood.
    BoxBlur,
}

pub fn encode(raw: &EmbeddingGrid, mode: EncoderMode) -> EmbeddingGrid {
    match mode {
        EncoderMode::Identity => raw.clone(),
        EncoderMode::BoxBlur => {
            let (h, w, ch) = (raw.height() as isize, raw.width() as isize, raw.channels());
            let mut out = EmbeddingGrid::zeros(raw.height(), raw.width(), ch);
            for r in 0..h {
                for c in 0..w {
                    let acc = out.pixel_mut(r as usize, c as usize);
                    let mut count = 0.0;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let (rr, cc) = (r + dr, c + dc);
                            if rr < 0 || cc < 0 || rr >= h || cc >= w {
                                continue;
                            }
                            count += 1.0;
                            for (a, x) in acc.iter_mut().zip(raw.pixel(rr as usize, cc as usize)) {
                                *a += x;
                            }
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= count);
                }
            }
            out
        }
    }
}

/// Apply the encoder to both grids of a sample.
pub fn encode_sample(sample: &Sample, mode: EncoderMode) -> Sample {
    Sample {
        support: encode(&sample.support, mode),
        query: encode(&sample.query, mode),
        ..sample.clone()
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Contract(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.values().iter().zip(gt.values()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
