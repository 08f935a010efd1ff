//! Exact first and second moments of Euler–Maruyama particles under a linear drift.
//!
//! For Gaussian `μ` and `ρ_0` the frozen-ratio drift `∇[log μ - log ρ_0]` is
//! affine, `A v + b` with `A = Σ_ρ₀⁻¹ - Σ_μ⁻¹` and `b = Σ_μ⁻¹ m_μ - Σ_ρ₀⁻¹ m_ρ₀`,
//! so one step maps moments as
//!
//! ```text
//! m' = (I + ηA) m + ηb
//! C' = (I + ηA) C (I + ηA)ᵀ + 2γη I
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::GaussianDensity;

/// Moments for steps `0..=steps`, starting from the moments of `ρ_0`.
pub fn gaussian_moment_recursion(
    mu: &GaussianDensity,
    rho0: &GaussianDensity,
    eta: f64,
    gamma: f64,
    steps: usize,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    if mu.dim() != rho0.dim() {
        return Err(Error::Contract("mu and rho0 dimensions differ".into()));
    }
    let d = mu.dim();
    let p_mu = mu.precision();
    let p_rho = rho0.precision();
    let a = &p_rho - &p_mu;
    let b = &p_mu * mu.mean() - &p_rho * rho0.mean();
    let transition = DMatrix::identity(d, d) + &a * eta;
    let diffusion = DMatrix::identity(d, d) * (2.0 * gamma * eta);

    let mut mean = rho0.mean().clone();
    let mut cov = rho0.covariance().clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push((mean.clone(), cov.clone()));
    for _ in 0..steps {
        mean = &transition * &mean + &b * eta;
        cov = &transition * &cov * transition.transpose() + &diffusion;
        out.push((mean.clone(), cov.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_variances_translate_at_constant_speed() {
        let mu = GaussianDensity::isotropic(&[1.0], 1.0).unwrap();
        let rho0 = GaussianDensity::isotropic(&[0.0], 1.0).unwrap();
        let traj = gaussian_moment_recursion(&mu, &rho0, 0.1, 0.0, 5).unwrap();
        assert!((traj[5].0[0] - 0.5).abs() < 1e-14);
        assert!((traj[5].1[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identical_densities_only_diffuse() {
        let g = GaussianDensity::isotropic(&[0.3, -0.2], 2.0).unwrap();
        let traj = gaussian_moment_recursion(&g, &g, 0.05, 0.1, 10).unwrap();
        let (m, c) = &traj[10];
        assert!((m - g.mean()).norm() < 1e-14);
        // C_t = Σ + 2γηt I.
        assert!((c[(0, 0)] - (2.0 + 2.0 * 0.1 * 0.05 * 10.0)).abs() < 1e-12);
    }
}
