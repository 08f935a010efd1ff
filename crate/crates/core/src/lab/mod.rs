//! Numerical laboratory for the convergence theory of the refinement flow.
//!
//! - [`quadratic`]: the linearized flow `dρ/dt = -H(ρ - μ*)` and its exponential decay bound.
//! - [`langevin`]: particle simulation of the frozen-ratio Langevin dynamics for Gaussians.
//! - [`moments`]: the exact affine moment recursion those particles must follow.
//! - [`fokker_planck`]: explicit 1-D Fokker–Planck solver and particle/PDE distances.

pub mod fokker_planck;
pub mod langevin;
pub mod moments;
pub mod quadratic;

pub use fokker_planck::{fokker_planck_1d, particle_vs_pde_distance, DensityGrid1D, DriftMode};
pub use langevin::{langevin_gaussian_ensemble, EnsembleStats, LinearDrift, ParticleEnsemble};
pub use moments::gaussian_moment_recursion;
pub use quadratic::{check_decay_bound, quadratic_flow_distance, DecayReport, QuadraticFlowSpec};
