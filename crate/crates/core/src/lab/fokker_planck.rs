//! Explicit finite-volume solver for the 1-D Fokker–Planck equation of the flow.
//!
//! Two drift modes are supported:
//!
//! - [`DriftMode::FrozenRatio`]: `∂ρ = -∂(ρ b) + γ ∂²ρ` with the fixed drift
//!   `b = ∂ log μ - ∂ log ρ_0`, the dynamics the refinement actually runs.
//! - [`DriftMode::Exact`]: `∂ρ = ∂(ρ ∂ log(ρ/μ)) + γ ∂²ρ`, which expands to
//!   `(1 + γ) ∂²ρ - ∂(ρ ∂ log μ)`.
//!
//! Fluxes use upwinding for the drift and central differences for diffusion,
//! with zero flux through both boundaries, so mass is conserved up to rounding.

use serde::Serialize;

use crate::error::{Error, Result};

/// Allowed deviation of total mass from one.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Cell-centred density on `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid1D {
    pub x_min: f64,
    pub x_max: f64,
    values: Vec<f64>,
}

impl DensityGrid1D {
    pub fn new(x_min: f64, x_max: f64, values: Vec<f64>) -> Result<Self> {
        if !(x_max > x_min) || values.len() < 2 {
            return Err(Error::Contract("density grid needs x_max > x_min and nx >= 2".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NumericalOverflow("density values must be finite and non-negative".into()));
        }
        let grid = DensityGrid1D { x_min, x_max, values };
        let mass = grid.mass();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Contract(format!("density integrates to {mass}, not 1")));
        }
        Ok(grid)
    }

    /// Sample `f` at cell centres and normalise.
    pub fn from_fn(x_min: f64, x_max: f64, nx: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = (x_max - x_min) / nx as f64;
        let raw: Vec<f64> = (0..nx).map(|i| f(x_min + (i as f64 + 0.5) * dx)).collect();
        let total: f64 = raw.iter().sum::<f64>() * dx;
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::RejectedInput("density has no mass on the grid".into()));
        }
        DensityGrid1D::new(x_min, x_max, raw.iter().map(|v| v / total).collect())
    }

    pub fn gaussian(x_min: f64, x_max: f64, nx: usize, mean: f64, variance: f64) -> Result<Self> {
        DensityGrid1D::from_fn(x_min, x_max, nx, |x| (-(x - mean).powi(2) / (2.0 * variance)).exp())
    }

    /// Normalised histogram of `samples` on the cells of `like`; samples
    /// outside the range are counted in the edge cells.
    pub fn histogram(samples: &[f64], like: &DensityGrid1D) -> Result<Self> {
        let nx = like.nx();
        let dx = like.dx();
        let mut counts = vec![0.0; nx];
        for &s in samples {
            let i = ((s - like.x_min) / dx).floor();
            let i = if i.is_nan() { 0 } else { i.clamp(0.0, (nx - 1) as f64) as usize };
            counts[i] += 1.0;
        }
        let norm = samples.len() as f64 * dx;
        DensityGrid1D::new(like.x_min, like.x_max, counts.iter().map(|c| c / norm).collect())
    }

    pub fn nx(&self) -> usize {
        self.values.len()
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().enumerate().map(|(i, v)| self.center(i) * v).sum::<f64>() * self.dx()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (self.center(i) - m).powi(2) * v)
            .sum::<f64>()
            * self.dx()
    }

    fn same_grid(&self, other: &DensityGrid1D) -> bool {
        self.nx() == other.nx() && self.x_min == other.x_min && self.x_max == other.x_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    FrozenRatio,
    Exact,
}

fn log_floor(v: f64) -> f64 {
    v.max(f64::MIN_POSITIVE).ln()
}

/// Face drifts (length nx - 1) and the diffusion coefficient for `mode`.
fn face_coefficients(mu: &DensityGrid1D, rho0: &DensityGrid1D, gamma: f64, mode: DriftMode) -> (Vec<f64>, f64) {
    let dx = mu.dx();
    let grad_log = |g: &DensityGrid1D, i: usize| (log_floor(g.values[i + 1]) - log_floor(g.values[i])) / dx;
    let drift = (0..mu.nx() - 1)
        .map(|i| match mode {
            DriftMode::FrozenRatio => grad_log(mu, i) - grad_log(rho0, i),
            DriftMode::Exact => grad_log(mu, i),
        })
        .collect();
    let diffusion = match mode {
        DriftMode::FrozenRatio => gamma,
        DriftMode::Exact => 1.0 + gamma,
    };
    (drift, diffusion)
}

/// Largest stable time step `dx² / (2D + max|b| dx)`.
pub fn stable_dt(mu: &DensityGrid1D, rho0: &DensityGrid1D, gamma: f64, mode: DriftMode) -> f64 {
    let (drift, diffusion) = face_coefficients(mu, rho0, gamma, mode);
    let dx = mu.dx();
    let max_drift = drift.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let denom = 2.0 * diffusion + max_drift * dx;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        dx * dx / denom
    }
}

/// Evolve `ρ_0` for `steps` explicit steps of size `dt`; returns the density
/// after every step, starting with `ρ_0` itself.
pub fn fokker_planck_1d(
    mu: &DensityGrid1D,
    rho0: &DensityGrid1D,
    gamma: f64,
    dt: f64,
    steps: usize,
    mode: DriftMode,
) -> Result<Vec<DensityGrid1D>> {
    if !mu.same_grid(rho0) {
        return Err(Error::Contract("mu and rho0 live on different grids".into()));
    }
    if !(gamma >= 0.0 && dt > 0.0) {
        return Err(Error::Validation(format!("need gamma >= 0 and dt > 0, got {gamma}, {dt}")));
    }
    let limit = stable_dt(mu, rho0, gamma, mode);
    if dt > limit {
        return Err(Error::Validation(format!(
            "dt = {dt} exceeds the explicit stability bound {limit}"
        )));
    }
    let (drift, diffusion) = face_coefficients(mu, rho0, gamma, mode);
    let dx = mu.dx();
    let nx = mu.nx();
    let mut rho = rho0.values.clone();
    let mut flux = vec![0.0; nx - 1];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(rho0.clone());
    for step in 0..steps {
        for i in 0..nx - 1 {
            let b = drift[i];
            let upwind = if b > 0.0 { rho[i] } else { rho[i + 1] };
            flux[i] = b * upwind - diffusion * (rho[i + 1] - rho[i]) / dx;
        }
        let r = dt / dx;
        for i in 0..nx {
            let inflow = if i > 0 { flux[i - 1] } else { 0.0 };
            let outflow = if i < nx - 1 { flux[i] } else { 0.0 };
            rho[i] += r * (inflow - outflow);
        }
        let next = DensityGrid1D::new(mu.x_min, mu.x_max, rho.clone()).map_err(|e| {
            Error::NumericalOverflow(format!("step {}: {e}", step + 1))
        })?;
        out.push(next);
    }
    Ok(out)
}

/// Total-variation distance `½ Σ |p_i - q_i| dx`.
pub fn particle_vs_pde_distance(histogram: &DensityGrid1D, pde: &DensityGrid1D) -> Result<f64> {
    if !histogram.same_grid(pde) {
        return Err(Error::Contract("histogram and PDE grids differ".into()));
    }
    let dx = pde.dx();
    Ok(0.5 * histogram.values.iter().zip(&pde.values).map(|(p, q)| (p - q).abs()).sum::<f64>() * dx)
}
