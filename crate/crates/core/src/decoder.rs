//! Differentiable stand-in for a promptable mask decoder.
//!
//! The decoder averages the query embeddings under the prompt points into a
//! prototype and scores every pixel by temperature-scaled cosine similarity:
//! `logit_j = (cos(z_j, p) - bias) / tau`. The scalar that drives refinement is
//! the soft-foreground-weighted mean logit `mean_j L_j σ(L_j)`, whose gradient
//! with respect to the whole grid (prototype dependence included) is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::GradientVector;
use crate::refine::PromptSet;

/// H×W×C feature grid, stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct EmbeddingGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct GridRepr {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TryFrom<GridRepr> for EmbeddingGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        EmbeddingGrid::new(r.height, r.width, r.channels, r.data)
    }
}

impl EmbeddingGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow(format!(
                "grid entry {i} is {}",
                data[i]
            )));
        }
        Ok(EmbeddingGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        EmbeddingGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                if px.len() != channels {
                    return Err(Error::Contract(format!(
                        "pixel ({r},{c}) has {} channels, expected {channels}",
                        px.len()
                    )));
                }
                data.extend(px);
            }
        }
        EmbeddingGrid::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Embedding vector at flat pixel index `j` (row-major).
    pub fn pixel_at(&self, j: usize) -> &[f64] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        self.pixel_at(row * self.width + col)
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let j = row * self.width + col;
        &mut self.data[j * self.channels..(j + 1) * self.channels]
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        EmbeddingGrid::new(self.height, self.width, self.channels, data)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        EmbeddingGrid {
            data: self.data.iter().map(|x| x * factor).collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &EmbeddingGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-pixel decoder logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Contract(format!(
                "logit map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow("non-finite logit".into()));
        }
        Ok(LogitMap {
            height,
            width,
            values,
        })
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

/// Boolean H×W mask. Serialized as row-major 0/1 arrays.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl TryFrom<MaskRepr> for BinaryMask {
    type Error = Error;

    fn try_from(r: MaskRepr) -> Result<Self> {
        if let Some(v) = r.values.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not 0 or 1")));
        }
        BinaryMask::new(r.height, r.width, r.values.iter().map(|&v| v == 1).collect())
    }
}

impl From<BinaryMask> for MaskRepr {
    fn from(m: BinaryMask) -> Self {
        MaskRepr {
            height: m.height,
            width: m.width,
            values: m.values.iter().map(|&b| b as u8).collect(),
        }
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Contract(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let values = (0..height * width).map(|j| f(j / width, j % width)).collect();
        BinaryMask {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.values[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.values.iter().all(|&b| b)
    }

    /// Row-major coordinates of the set pixels.
    pub fn coordinates(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(j, _)| (j / self.width, j % self.width))
    }

    /// Row-major run lengths, alternating false/true and starting with a
    /// (possibly zero-length) false run.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in &self.values {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for (i, &len) in runs.iter().enumerate() {
            values.extend(std::iter::repeat_n(i % 2 == 1, len));
        }
        BinaryMask::new(height, width, values)
    }
}

/// Parameters of the cosine-prototype head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderParams {
    /// Temperature.
    pub tau: f64,
    /// Foreground threshold in cosine space.
    pub bias: f64,
}

impl Default for DecoderParams {
    fn default() -> Self {
        DecoderParams {
            tau: 0.1,
            bias: 0.5,
        }
    }
}

impl DecoderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Validation(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.bias > -1.0 && self.bias < 1.0) {
            return Err(Error::Validation(format!(
                "bias must lie in (-1, 1), got {}",
                self.bias
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, with any zero vector scoring 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_prompts(z: &EmbeddingGrid, prompts: &PromptSet) -> Result<()> {
    for &(r, c) in prompts.points() {
        if r >= z.height() || c >= z.width() {
            return Err(Error::Contract(format!(
                "prompt ({r},{c}) outside {}x{} grid",
                z.height(),
                z.width()
            )));
        }
    }
    Ok(())
}

/// Mean embedding under the prompt points.
pub fn prototype_from_prompts(z: &EmbeddingGrid, prompts: &PromptSet) -> Result<Vec<f64>> {
    check_prompts(z, prompts)?;
    let mut proto = vec![0.0; z.channels()];
    for &(r, c) in prompts.points() {
        for (p, x) in proto.iter_mut().zip(z.pixel(r, c)) {
            *p += x;
        }
    }
    let k = prompts.len() as f64;
    proto.iter_mut().for_each(|p| *p /= k);
    Ok(proto)
}

fn nonzero_prototype(z: &EmbeddingGrid, prompts: &PromptSet) -> Result<Vec<f64>> {
    let proto = prototype_from_prompts(z, prompts)?;
    if proto.iter().all(|&x| x == 0.0) {
        return Err(Error::DegeneratePrototype);
    }
    Ok(proto)
}

pub fn decode_logits(z: &EmbeddingGrid, prompts: &PromptSet, params: &DecoderParams) -> Result<LogitMap> {
    let proto = nonzero_prototype(z, prompts)?;
    decode_logits_with_prototype(z, &proto, params)
}

/// Logits against an externally supplied prototype.
pub fn decode_logits_with_prototype(
    z: &EmbeddingGrid,
    prototype: &[f64],
    params: &DecoderParams,
) -> Result<LogitMap> {
    if prototype.len() != z.channels() {
        return Err(Error::Contract(format!(
            "prototype has {} channels, grid has {}",
            prototype.len(),
            z.channels()
        )));
    }
    if prototype.iter().all(|&x| x == 0.0) {
        return Err(Error::DegeneratePrototype);
    }
    let values = (0..z.pixel_count())
        .map(|j| (cosine(z.pixel_at(j), prototype) - params.bias) / params.tau)
        .collect();
    LogitMap::new(z.height(), z.width(), values)
}

pub fn binarize(logits: &LogitMap) -> BinaryMask {
    BinaryMask {
        height: logits.height,
        width: logits.width,
        values: logits.values.iter().map(|&l| l > 0.0).collect(),
    }
}

/// `L σ(L)` and its derivative `σ + L σ (1 - σ)`.
fn soft_foreground(l: f64) -> (f64, f64) {
    let s = sigmoid(l);
    (l * s, s + l * s * (1.0 - s))
}

pub fn refinement_objective(z: &EmbeddingGrid, prompts: &PromptSet, params: &DecoderParams) -> Result<f64> {
    let logits = decode_logits(z, prompts, params)?;
    Ok(mean_soft_foreground(&logits))
}

pub fn objective_with_prototype(z: &EmbeddingGrid, prototype: &[f64], params: &DecoderParams) -> Result<f64> {
    let logits = decode_logits_with_prototype(z, prototype, params)?;
    Ok(mean_soft_foreground(&logits))
}

fn mean_soft_foreground(logits: &LogitMap) -> f64 {
    let n = logits.values.len() as f64;
    logits.values.iter().map(|&l| soft_foreground(l).0).sum::<f64>() / n
}

/// Per-pixel gradient with the prototype held fixed, plus the gradient with
/// respect to the prototype itself.
fn objective_gradients(z: &EmbeddingGrid, proto: &[f64], params: &DecoderParams) -> (Vec<f64>, Vec<f64>) {
    let ch = z.channels();
    let n = z.pixel_count() as f64;
    let np = dot(proto, proto).sqrt();
    let mut grad = vec![0.0; z.data().len()];
    let mut proto_grad = vec![0.0; ch];
    for j in 0..z.pixel_count() {
        let x = z.pixel_at(j);
        let nx = dot(x, x).sqrt();
        if nx == 0.0 {
            // Zero pixels decode at cosine 0 and contribute no gradient.
            continue;
        }
        let cos = dot(x, proto) / (nx * np);
        let l = (cos - params.bias) / params.tau;
        let w = soft_foreground(l).1 / (params.tau * n);
        let g = &mut grad[j * ch..(j + 1) * ch];
        for c in 0..ch {
            g[c] = w * (proto[c] / (nx * np) - cos * x[c] / (nx * nx));
            proto_grad[c] += w * (x[c] / (nx * np) - cos * proto[c] / (np * np));
        }
    }
    (grad, proto_grad)
}

/// Exact gradient of [`refinement_objective`] with respect to every entry of `z`,
/// including the dependence of the prototype on the prompt pixels.
pub fn grad_refinement_objective(
    z: &EmbeddingGrid,
    prompts: &PromptSet,
    params: &DecoderParams,
) -> Result<GradientVector> {
    let proto = nonzero_prototype(z, prompts)?;
    let (mut grad, proto_grad) = objective_gradients(z, &proto, params);
    let ch = z.channels();
    let k = prompts.len() as f64;
    for &(r, c) in prompts.points() {
        let j = r * z.width() + c;
        for (g, pg) in grad[j * ch..(j + 1) * ch].iter_mut().zip(&proto_grad) {
            *g += pg / k;
        }
    }
    GradientVector::new(grad)
}

/// Gradient of [`objective_with_prototype`] with the prototype treated as a constant.
pub fn grad_objective_fixed_prototype(
    z: &EmbeddingGrid,
    prototype: &[f64],
    params: &DecoderParams,
) -> Result<GradientVector> {
    if prototype.len() != z.channels() {
        return Err(Error::Contract("prototype channel mismatch".into()));
    }
    if prototype.iter().all(|&x| x == 0.0) {
        return Err(Error::DegeneratePrototype);
    }
    let (grad, _) = objective_gradients(z, prototype, params);
    GradientVector::new(grad)
}
