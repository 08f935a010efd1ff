//! Entropy-regularized KL flow primitives.
//!
//! The refined variable `v` follows the Euler–Maruyama discretization of
//!
//! ```text
//! dv = -∇ log(ρ_t / μ) dt + sqrt(2γ) dW
//! ```
//!
//! with the ratio frozen at `ρ_0 / μ = exp(-d(v))`, where `d` is the logit of a
//! classifier separating the two densities. The drift then becomes `+η ∇d(v)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the refinement flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Step size η.
    pub eta: f64,
    /// Entropy weight γ; the diffusion scale is `sqrt(2γη)`.
    pub gamma: f64,
    /// Number of refinement iterations T.
    pub iterations: usize,
    /// Global L2 bound on the gradient; `None` disables clipping.
    #[serde(with = "clip_norm_serde")]
    pub clip_norm: Option<f64>,
    /// Prompt points k resampled at each iteration.
    pub prompt_count: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            eta: 1e-3,
            gamma: 0.1,
            iterations: 5,
            clip_norm: Some(1.0),
            prompt_count: 8,
            seed: 0,
        }
    }
}

impl FlowConfig {
    /// Defaults for small-object (part) tasks: smaller step, fewer prompts.
    pub fn small_object() -> Self {
        FlowConfig {
            eta: 1e-4,
            prompt_count: 3,
            ..FlowConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Validation(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::Validation("iterations must be >= 1".into()));
        }
        if self.prompt_count == 0 {
            return Err(Error::Validation("prompt_count must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Validation(format!("clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but admits `eta == 0`, which the
    /// sweep and degeneracy checks use to switch the dynamics off.
    pub fn validate_allow_zero_step(&self) -> Result<()> {
        if self.eta == 0.0 {
            let probe = FlowConfig {
                eta: 1.0,
                ..self.clone()
            };
            return probe.validate();
        }
        self.validate()
    }
}

/// `clip_norm` is written as a number or the string `"none"`.
mod clip_norm_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.serialize_f64(*v),
            None => s.serialize_str("none"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Some(v)),
            Raw::Text(t) if t.eq_ignore_ascii_case("none") => Ok(None),
            Raw::Text(t) => Err(de::Error::custom(format!(
                "clip_norm must be a number or \"none\", got {t:?}"
            ))),
        }
    }
}

/// A multivariate normal density with a validated covariance.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::RejectedInput("gaussian dimension must be >= 1".into()));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Contract(format!(
                "covariance is {}x{}, mean has length {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|x| !x.is_finite()) {
            return Err(Error::RejectedInput("non-finite gaussian parameter".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 {
                    return Err(Error::RejectedInput("covariance is not symmetric".into()));
                }
            }
        }
        let eigen = covariance.clone().symmetric_eigen();
        if eigen.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::RejectedInput(
                "covariance is singular or indefinite".into(),
            ));
        }
        let cholesky = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::RejectedInput("covariance is not positive definite".into()))?;
        Ok(GaussianDensity {
            mean,
            covariance,
            cholesky,
        })
    }

    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        GaussianDensity::new(
            DVector::from_column_slice(mean),
            DMatrix::identity(d, d) * variance,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular factor `L` with `L Lᵀ = Σ`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.cholesky.l()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }

    pub fn log_det_covariance(&self) -> f64 {
        2.0 * self.cholesky.l().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// Differential entropy `-∫ρ log ρ`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
            + self.log_det_covariance())
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let solved = self.cholesky.solve(&diff);
        let d = self.dim() as f64;
        -0.5 * (diff.dot(&solved)
            + d * (2.0 * std::f64::consts::PI).ln()
            + self.log_det_covariance())
    }
}

/// A gradient with respect to the refined variable, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow(format!(
                "gradient entry {i} is {}",
                values[i]
            )));
        }
        Ok(GradientVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `ρ_0/μ = (1 - D)/D = exp(-d)` for a classifier with logit `d`.
pub fn density_ratio_from_logit(d: f64) -> Result<f64> {
    if !d.is_finite() {
        return Err(Error::RejectedInput(format!("logit must be finite, got {d}")));
    }
    let ratio = (-d).exp();
    if !ratio.is_finite() {
        return Err(Error::NumericalOverflow(format!(
            "density ratio exp({}) overflows",
            -d
        )));
    }
    Ok(ratio)
}

/// One Euler–Maruyama update `v + η·grad + sqrt(2γη)·ξ`.
pub fn euler_maruyama_step(
    v: &[f64],
    grad: &GradientVector,
    eta: f64,
    gamma: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != grad.len() || v.len() != noise.len() {
        return Err(Error::Contract(format!(
            "shape mismatch: v={}, grad={}, noise={}",
            v.len(),
            grad.len(),
            noise.len()
        )));
    }
    if !(eta >= 0.0 && gamma >= 0.0) {
        return Err(Error::Contract(format!(
            "eta and gamma must be non-negative, got eta={eta}, gamma={gamma}"
        )));
    }
    let diffusion = (2.0 * gamma * eta).sqrt();
    let out: Vec<f64> = v
        .iter()
        .zip(grad.values())
        .zip(noise)
        .map(|((&x, &g), &xi)| x + eta * g + diffusion * xi)
        .collect();
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericalOverflow(format!(
            "update produced {} at entry {i}",
            out[i]
        )));
    }
    Ok(out)
}

/// Global L2-norm clipping. Gradients already inside the ball are returned unchanged.
pub fn clip_gradient(grad: &GradientVector, max_norm: f64) -> GradientVector {
    let norm = grad.norm();
    if norm <= max_norm {
        return grad.clone();
    }
    let mut scale = max_norm / norm;
    loop {
        let values: Vec<f64> = grad.values.iter().map(|g| g * scale).collect();
        let clipped = GradientVector { values };
        // Rounding can leave the scaled norm one ulp above the cap.
        if clipped.norm() <= max_norm {
            return clipped;
        }
        scale = f64::from_bits(scale.to_bits() - 1);
    }
}

/// `KL(μ‖ρ) + γ ∫ρ log ρ` for Gaussian `μ`, `ρ`, in closed form.
pub fn kl_entropy_functional_gaussian(
    mu: &GaussianDensity,
    rho: &GaussianDensity,
    gamma: f64,
) -> Result<f64> {
    if mu.dim() != rho.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch: mu is {}, rho is {}",
            mu.dim(),
            rho.dim()
        )));
    }
    Ok(gaussian_kl(mu, rho) - gamma * rho.entropy())
}

/// `KL(p‖q)` between Gaussians.
pub fn gaussian_kl(p: &GaussianDensity, q: &GaussianDensity) -> f64 {
    let d = p.dim() as f64;
    let q_prec = q.precision();
    let trace = (&q_prec * p.covariance()).trace();
    let diff = q.mean() - p.mean();
    let mahalanobis = diff.dot(&(&q_prec * &diff));
    let kl = 0.5 * (trace + mahalanobis - d + q.log_det_covariance() - p.log_det_covariance());
    // Rounding can push identical densities a hair below zero.
    kl.max(0.0)
}
