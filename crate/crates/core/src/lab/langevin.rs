//! Particle simulation of the frozen-ratio Langevin dynamics.
//!
//! Particles are updated in fixed-size chunks; chunk `c` at step `s` draws its
//! noise from its own counter-based stream, so results do not depend on the
//! number of worker threads.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{euler_maruyama_step, FlowConfig, GaussianDensity, GradientVector};
use crate::rng::{self, Domain};

const CHUNK: usize = 4096;

/// Affine drift `v ↦ A v + b`.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearDrift {
    /// `∇[log μ - log ρ_0]` for Gaussian `μ` and `ρ_0`.
    pub fn frozen_ratio(mu: &GaussianDensity, rho0: &GaussianDensity) -> Result<Self> {
        if mu.dim() != rho0.dim() {
            return Err(Error::Contract("mu and rho0 dimensions differ".into()));
        }
        let p_mu = mu.precision();
        let p_rho = rho0.precision();
        Ok(LinearDrift {
            a: &p_rho - &p_mu,
            b: &p_mu * mu.mean() - &p_rho * rho0.mean(),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval_into(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = self.b[i];
            for j in 0..d {
                acc += self.a[(i, j)] * v[j];
            }
            out[i] = acc;
        }
    }
}

/// N particles in D dimensions, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    particles: Vec<f64>,
    step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub step: usize,
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub covariance: DMatrix<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, particles: Vec<f64>) -> Result<Self> {
        if dim == 0 || !particles.len().is_multiple_of(dim) || particles.len() / dim < 2 {
            return Err(Error::Contract(format!(
                "need at least two {dim}-dimensional particles, got {} values",
                particles.len()
            )));
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow("non-finite particle".into()));
        }
        Ok(ParticleEnsemble {
            dim,
            particles,
            step: 0,
        })
    }

    /// Draw `n` particles from `density`.
    pub fn sample(density: &GaussianDensity, n: usize, seed: u64) -> Result<Self> {
        let d = density.dim();
        let l = density.cholesky_factor();
        let mean = density.mean();
        let mut particles = vec![0.0; n * d];
        particles
            .par_chunks_mut(CHUNK * d)
            .enumerate()
            .for_each(|(chunk, block)| {
                let mut rng = rng::stream(seed, Domain::Particles, chunk as u64, 0);
                let xi = rng::standard_normal_vec(&mut rng, block.len());
                for (p, z) in block.chunks_mut(d).zip(xi.chunks(d)) {
                    for i in 0..d {
                        p[i] = mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                    }
                }
            });
        ParticleEnsemble::new(d, particles)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.particles.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    /// Coordinate `axis` of every particle.
    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.particles.chunks(self.dim).map(|p| p[axis]).collect()
    }

    pub fn stats(&self) -> EnsembleStats {
        let d = self.dim;
        let n = self.len() as f64;
        let mut mean = DVector::zeros(d);
        for p in self.particles.chunks(d) {
            for i in 0..d {
                mean[i] += p[i];
            }
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for p in self.particles.chunks(d) {
            for i in 0..d {
                let di = p[i] - mean[i];
                for j in 0..=i {
                    cov[(i, j)] += di * (p[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                let v = cov[(i, j)] / (n - 1.0);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        EnsembleStats {
            step: self.step,
            mean,
            covariance: cov,
        }
    }

    /// One Euler–Maruyama step `v + η(Av + b) + sqrt(2γη) ξ` for every particle.
    pub fn langevin_step(&mut self, drift: &LinearDrift, eta: f64, gamma: f64, seed: u64) -> Result<()> {
        if drift.dim() != self.dim {
            return Err(Error::Contract("drift dimension does not match particles".into()));
        }
        let d = self.dim;
        let step = self.step as u64 + 1;
        self.particles
            .par_chunks_mut(CHUNK * d)
            .enumerate()
            .try_for_each(|(chunk, block)| -> Result<()> {
                let mut rng = rng::stream(seed, Domain::Particles, chunk as u64, step);
                let noise = rng::standard_normal_vec(&mut rng, block.len());
                let mut grad = vec![0.0; block.len()];
                for (p, g) in block.chunks(d).zip(grad.chunks_mut(d)) {
                    drift.eval_into(p, g);
                }
                let moved = euler_maruyama_step(block, &GradientVector::new(grad)?, eta, gamma, &noise)?;
                block.copy_from_slice(&moved);
                Ok(())
            })?;
        self.step += 1;
        Ok(())
    }
}

/// Simulate `n` particles from `ρ_0` for `cfg.iterations` frozen-ratio steps
/// and return statistics for steps `0..=T`. Gradient clipping is not applied.
pub fn langevin_gaussian_ensemble(
    mu: &GaussianDensity,
    rho0: &GaussianDensity,
    cfg: &FlowConfig,
    n: usize,
) -> Result<Vec<EnsembleStats>> {
    let drift = LinearDrift::frozen_ratio(mu, rho0)?;
    let mut ensemble = ParticleEnsemble::sample(rho0, n, cfg.seed)?;
    let mut stats = Vec::with_capacity(cfg.iterations + 1);
    stats.push(ensemble.stats());
    for _ in 0..cfg.iterations {
        ensemble.langevin_step(&drift, cfg.eta, cfg.gamma, cfg.seed)?;
        stats.push(ensemble.stats());
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_densities_keep_mean() {
        let g = GaussianDensity::isotropic(&[0.5, -1.0], 1.0).unwrap();
        let cfg = FlowConfig {
            eta: 0.05,
            gamma: 0.2,
            iterations: 10,
            ..FlowConfig::default()
        };
        let n = 20_000;
        let stats = langevin_gaussian_ensemble(&g, &g, &cfg, n).unwrap();
        let last = stats.last().unwrap();
        let band = 4.0 * (last.covariance.trace() / n as f64).sqrt();
        assert!((&last.mean - g.mean()).norm() < band);
    }

    #[test]
    fn one_dimensional_translation() {
        let mu = GaussianDensity::isotropic(&[1.0], 1.0).unwrap();
        let rho0 = GaussianDensity::isotropic(&[0.0], 1.0).unwrap();
        let cfg = FlowConfig {
            eta: 0.1,
            gamma: 0.0,
            iterations: 5,
            ..FlowConfig::default()
        };
        let n = 100_000;
        let stats = langevin_gaussian_ensemble(&mu, &rho0, &cfg, n).unwrap();
        let last = &stats[5];
        let sd = last.covariance[(0, 0)].sqrt();
        assert!((last.mean[0] - 0.5).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn simulation_is_reproducible() {
        let mu = GaussianDensity::isotropic(&[1.0, 0.0], 0.5).unwrap();
        let rho0 = GaussianDensity::isotropic(&[0.0, 0.0], 1.0).unwrap();
        let cfg = FlowConfig {
            eta: 0.05,
            gamma: 0.3,
            iterations: 3,
            seed: 77,
            ..FlowConfig::default()
        };
        let a = langevin_gaussian_ensemble(&mu, &rho0, &cfg, 10_000).unwrap();
        let b = langevin_gaussian_ensemble(&mu, &rho0, &cfg, 10_000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ensemble_needs_two_particles() {
        assert!(ParticleEnsemble::new(2, vec![0.0, 1.0]).is_err());
        assert!(ParticleEnsemble::new(2, vec![0.0; 3]).is_err());
    }
}
