//! Linearized gradient flow near a minimizer.
//!
//! Close to a local minimizer `μ*` the flow reduces to `dρ/dt = -H (ρ - μ*)`
//! with `H` the (positive definite) Hessian of the functional, so
//! `ρ_t - μ* = exp(-H t)(ρ_0 - μ*)` and
//! `‖ρ_t - μ*‖² ≤ exp(-2 λ_min t) ‖ρ_0 - μ*‖²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Violations are counted only when the squared distance exceeds the bound by more than this.
pub const DECAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct QuadraticFlowSpec {
    hessian: DMatrix<f64>,
    mu_star: DVector<f64>,
    rho0: DVector<f64>,
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    lambda_min: f64,
}

impl QuadraticFlowSpec {
    pub fn new(hessian: DMatrix<f64>, mu_star: DVector<f64>, rho0: DVector<f64>) -> Result<Self> {
        let d = mu_star.len();
        if hessian.nrows() != d || hessian.ncols() != d || rho0.len() != d {
            return Err(Error::Contract("hessian, mu_star and rho0 dimensions disagree".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (hessian[(i, j)] - hessian[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Contract("hessian is not symmetric".into()));
                }
            }
        }
        let eigen = hessian.clone().symmetric_eigen();
        let lambda_min = eigen.eigenvalues.min();
        if !(lambda_min > 0.0) {
            return Err(Error::Contract(format!(
                "hessian is not positive definite (smallest eigenvalue {lambda_min})"
            )));
        }
        Ok(QuadraticFlowSpec {
            hessian,
            mu_star,
            rho0,
            eigen,
            lambda_min,
        })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn mu_star(&self) -> &DVector<f64> {
        &self.mu_star
    }

    pub fn rho0(&self) -> &DVector<f64> {
        &self.rho0
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Unit eigenvector of the smallest eigenvalue.
    pub fn slowest_direction(&self) -> DVector<f64> {
        let i = self.eigen.eigenvalues.imin();
        self.eigen.eigenvectors.column(i).into_owned()
    }

    /// Same Hessian and minimizer, new starting point.
    pub fn with_rho0(&self, rho0: DVector<f64>) -> QuadraticFlowSpec {
        QuadraticFlowSpec {
            rho0,
            ..self.clone()
        }
    }

    /// Random spec with eigenvalues in `[0.1, 3]`, a random orthogonal basis and
    /// standard-normal `μ*` and `ρ_0`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> QuadraticFlowSpec {
        let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gauss.qr().q();
        let eigenvalues = DVector::from_fn(dim, |_, _| rng.random_range(0.1..3.0));
        let h = &q * DMatrix::from_diagonal(&eigenvalues) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let mu_star = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rho0 = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        QuadraticFlowSpec::new(h, mu_star, rho0).expect("constructed positive definite")
    }
}

/// `‖ρ_t - μ*‖₂` from the exact solution `exp(-H t)(ρ_0 - μ*)`.
pub fn quadratic_flow_distance(spec: &QuadraticFlowSpec, t: f64) -> f64 {
    let offset = &spec.rho0 - &spec.mu_star;
    let coords = spec.eigen.eigenvectors.transpose() * offset;
    coords
        .iter()
        .zip(spec.eigen.eigenvalues.iter())
        .map(|(c, l)| (c * (-l * t).exp()).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayReport {
    pub checked: usize,
    /// Times where `‖ρ_t - μ*‖²` exceeds the bound by more than [`DECAY_TOLERANCE`].
    pub violations: usize,
    /// Smallest `bound - ‖ρ_t - μ*‖²` over the checked times (negative on violation).
    pub tightest_slack: f64,
}

pub fn check_decay_bound(spec: &QuadraticFlowSpec, times: &[f64]) -> DecayReport {
    let initial = quadratic_flow_distance(spec, 0.0).powi(2);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for &t in times {
        let lhs = quadratic_flow_distance(spec, t).powi(2);
        let rhs = (-2.0 * spec.lambda_min * t).exp() * initial;
        let slack = rhs - lhs;
        if slack < -DECAY_TOLERANCE {
            violations += 1;
        }
        tightest = tightest.min(slack);
    }
    DecayReport {
        checked: times.len(),
        violations,
        tightest_slack: tightest,
    }
}

/// Decay rate `-(d/dt) log ‖ρ_t - μ*‖` measured between two times.
pub fn measured_decay_rate(spec: &QuadraticFlowSpec, t0: f64, t1: f64) -> f64 {
    let d0 = quadratic_flow_distance(spec, t0);
    let d1 = quadratic_flow_distance(spec, t1);
    -(d1.ln() - d0.ln()) / (t1 - t0)
}
