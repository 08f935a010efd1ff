//! Verification suites over the convergence lab and the decoder gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::StandardUniform;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{grad_refinement_objective, refinement_objective, DecoderParams, EmbeddingGrid};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, GaussianDensity, GradientVector};
use crate::lab::fokker_planck::{fokker_planck_1d, particle_vs_pde_distance, stable_dt, DensityGrid1D, DriftMode};
use crate::lab::langevin::{langevin_gaussian_ensemble, LinearDrift, ParticleEnsemble};
use crate::lab::moments::gaussian_moment_recursion;
use crate::lab::quadratic::{check_decay_bound, measured_decay_rate, QuadraticFlowSpec, DECAY_TOLERANCE};
use crate::refine::PromptSet;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    All,
    Decay,
    Moment,
    FokkerPlanck,
    Gradient,
}

impl Suite {
    fn includes(self, family: Suite) -> bool {
        self == Suite::All || self == family
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "decay" => Ok(Suite::Decay),
            "moment" => Ok(Suite::Moment),
            "fokker-planck" | "fp" => Ok(Suite::FokkerPlanck),
            "gradient" => Ok(Suite::Gradient),
            other => Err(Error::Validation(format!(
                "unknown suite {other:?}; expected all, decay, moment, fokker-planck or gradient"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::All => "all",
            Suite::Decay => "decay",
            Suite::Moment => "moment",
            Suite::FokkerPlanck => "fokker-planck",
            Suite::Gradient => "gradient",
        };
        f.write_str(name)
    }
}

/// Outcome of one check. `measured` is compared against `tolerance`; `details`
/// carries supporting numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub family: Suite,
    pub check: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub details: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Verdict>,
}

pub type GradientFn = fn(&EmbeddingGrid, &PromptSet, &DecoderParams) -> Result<GradientVector>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Gradient under test; swapped out to confirm the check can fail.
    pub gradient: GradientFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            gradient: grad_refinement_objective,
        }
    }
}

fn verdict(family: Suite, check: &str, passed: bool, measured: f64, tolerance: f64, details: &[(&str, f64)]) -> Verdict {
    Verdict {
        family,
        check: check.into(),
        passed,
        measured,
        tolerance,
        details: details.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Run every check in `suite`. Check failures are reported in the verdicts;
/// only errors that prevent a check from producing a number are returned.
pub fn run_verify(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if suite.includes(Suite::Decay) {
        checks.extend(decay_checks(opts.seed));
    }
    if suite.includes(Suite::Moment) {
        checks.push(moment_check(opts.seed)?);
    }
    if suite.includes(Suite::FokkerPlanck) {
        checks.extend(fokker_planck_checks(opts.seed)?);
    }
    if suite.includes(Suite::Gradient) {
        checks.push(gradient_check(opts.seed, opts.gradient)?);
    }
    Ok(VerifyReport {
        suite,
        seed: opts.seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

pub const DECAY_SPECS: usize = 200;
pub const DECAY_TIMES: usize = 100;
pub const SATURATION_TOLERANCE: f64 = 1e-6;

fn decay_checks(seed: u64) -> Vec<Verdict> {
    let mut rng = rng::stream(seed, Domain::Lab, 1, 0);
    let times: Vec<f64> = (1..=DECAY_TIMES).map(|i| 10.0 * i as f64 / DECAY_TIMES as f64).collect();
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    let mut worst_rate_err: f64 = 0.0;
    let mut worst_aligned_gap: f64 = 0.0;
    for _ in 0..DECAY_SPECS {
        let dim = rng.random_range(1..=8);
        let spec = QuadraticFlowSpec::random(&mut rng, dim);
        let report = check_decay_bound(&spec, &times);
        violations += report.violations;
        tightest = tightest.min(report.tightest_slack);

        let scale = 0.5 + rng.random::<f64>();
        let aligned = spec.with_rho0(spec.mu_star() + spec.slowest_direction() * scale);
        let aligned_report = check_decay_bound(&aligned, &times);
        violations += aligned_report.violations;
        worst_aligned_gap = worst_aligned_gap.max(aligned_report.tightest_slack.abs());
        let rate = measured_decay_rate(&aligned, 0.5, 5.0);
        worst_rate_err = worst_rate_err.max((rate - spec.lambda_min()).abs() / spec.lambda_min());
    }
    vec![
        verdict(
            Suite::Decay,
            "decay-bound",
            violations == 0,
            violations as f64,
            0.0,
            &[
                ("specs", DECAY_SPECS as f64),
                ("times_per_spec", DECAY_TIMES as f64),
                ("slack_tolerance", DECAY_TOLERANCE),
                ("tightest_slack", tightest),
            ],
        ),
        verdict(
            Suite::Decay,
            "decay-saturation",
            worst_rate_err < SATURATION_TOLERANCE && worst_aligned_gap <= DECAY_TOLERANCE,
            worst_rate_err,
            SATURATION_TOLERANCE,
            &[("max_aligned_slack", worst_aligned_gap)],
        ),
    ]
}

pub const MOMENT_CONFIGS: usize = 20;
pub const MOMENT_PARTICLES: usize = 100_000;
pub const MOMENT_STEPS: usize = 50;
pub const MOMENT_SIGMAS: f64 = 4.0;
pub const COVARIANCE_TOLERANCE: f64 = 0.05;

/// Gaussian with mean in `[-1, 1]^d` and covariance eigenvalues in `[0.5, 2]`.
pub fn random_gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> GaussianDensity {
    let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let eig = DVector::from_fn(dim, |_, _| rng.random_range(0.5..2.0));
    let cov = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianDensity::new(DVector::from_vec(mean), cov).expect("constructed positive definite")
}

fn moment_check(seed: u64) -> Result<Verdict> {
    let mut rng = rng::stream(seed, Domain::Lab, 2, 0);
    let mut worst_band_ratio: f64 = 0.0;
    let mut worst_cov_rel: f64 = 0.0;
    for _ in 0..MOMENT_CONFIGS {
        let dim = rng.random_range(1..=4);
        let mu = random_gaussian(&mut rng, dim);
        let rho0 = random_gaussian(&mut rng, dim);
        let cfg = FlowConfig {
            eta: rng.random_range(0.01..0.1),
            gamma: rng.random_range(0.05..0.5),
            iterations: MOMENT_STEPS,
            seed: rng.next_u64(),
            ..FlowConfig::default()
        };
        let oracle = gaussian_moment_recursion(&mu, &rho0, cfg.eta, cfg.gamma, MOMENT_STEPS)?;
        let stats = langevin_gaussian_ensemble(&mu, &rho0, &cfg, MOMENT_PARTICLES)?;
        for (s, (m, c)) in stats.iter().zip(&oracle) {
            let band = MOMENT_SIGMAS * (c.trace() / MOMENT_PARTICLES as f64).sqrt();
            worst_band_ratio = worst_band_ratio.max((&s.mean - m).norm() / band);
        }
        let (_, c_final) = oracle.last().expect("recursion returns steps + 1 entries");
        let s_final = stats.last().expect("ensemble returns steps + 1 entries");
        worst_cov_rel = worst_cov_rel.max((&s_final.covariance - c_final).norm() / c_final.norm());
    }
    Ok(verdict(
        Suite::Moment,
        "moment-oracle",
        worst_band_ratio < 1.0 && worst_cov_rel < COVARIANCE_TOLERANCE,
        worst_band_ratio,
        1.0,
        &[
            ("configs", MOMENT_CONFIGS as f64),
            ("particles", MOMENT_PARTICLES as f64),
            ("steps", MOMENT_STEPS as f64),
            ("max_covariance_rel_frobenius", worst_cov_rel),
            ("covariance_tolerance", COVARIANCE_TOLERANCE),
        ],
    ))
}

pub const FP_NX: usize = 256;
pub const FP_PARTICLES: usize = 100_000;
pub const FP_TV_TOLERANCE: f64 = 0.05;
pub const FP_MASS_TOLERANCE: f64 = 1e-6;

/// Particle and PDE solutions of one 1-D frozen-ratio problem at matched times.
#[derive(Debug, Clone)]
pub struct CrossCheck {
    pub checkpoints: Vec<usize>,
    pub tv: Vec<f64>,
    pub max_mass_error: f64,
}

/// `μ = N(1, 0.5)`, `ρ_0 = N(0, 1)`, `γ = 0.5`, `η = 0.01`, 100 particle steps,
/// compared every 20 steps on `[-5, 6]`.
pub fn fokker_planck_cross_check(seed: u64) -> Result<CrossCheck> {
    let (x_min, x_max) = (-5.0, 6.0);
    let (gamma, eta, steps, every) = (0.5, 0.01, 100, 20);
    let mu_g = GaussianDensity::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.5))?;
    let rho_g = GaussianDensity::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))?;
    let mu = DensityGrid1D::gaussian(x_min, x_max, FP_NX, 1.0, 0.5)?;
    let rho0 = DensityGrid1D::gaussian(x_min, x_max, FP_NX, 0.0, 1.0)?;

    let substeps = (eta / stable_dt(&mu, &rho0, gamma, DriftMode::FrozenRatio)).ceil() as usize;
    let dt = eta / substeps as f64;
    let pde = fokker_planck_1d(&mu, &rho0, gamma, dt, steps * substeps, DriftMode::FrozenRatio)?;
    let max_mass_error = pde.iter().map(|d| (d.mass() - 1.0).abs()).fold(0.0, f64::max);

    let drift = LinearDrift::frozen_ratio(&mu_g, &rho_g)?;
    let mut ensemble = ParticleEnsemble::sample(&rho_g, FP_PARTICLES, seed)?;
    let mut checkpoints = Vec::new();
    let mut tv = Vec::new();
    for step in 1..=steps {
        ensemble.langevin_step(&drift, eta, gamma, seed)?;
        if step % every == 0 {
            let hist = DensityGrid1D::histogram(&ensemble.coordinate(0), &mu)?;
            checkpoints.push(step);
            tv.push(particle_vs_pde_distance(&hist, &pde[step * substeps])?);
        }
    }
    Ok(CrossCheck {
        checkpoints,
        tv,
        max_mass_error,
    })
}

/// TV distance between frozen-ratio and exact-drift solutions after `T = 10`
/// steps of size `η`, for each `η`.
pub fn frozen_vs_exact(etas: &[f64]) -> Result<Vec<f64>> {
    let (x_min, x_max, gamma, steps) = (-5.0, 6.0, 0.5, 10);
    let mu = DensityGrid1D::gaussian(x_min, x_max, FP_NX, 1.0, 0.5)?;
    let rho0 = DensityGrid1D::gaussian(x_min, x_max, FP_NX, 0.0, 1.0)?;
    let limit = stable_dt(&mu, &rho0, gamma, DriftMode::FrozenRatio).min(stable_dt(&mu, &rho0, gamma, DriftMode::Exact));
    etas.iter()
        .map(|&eta| {
            let substeps = (eta / limit).ceil() as usize;
            let dt = eta / substeps as f64;
            let n = steps * substeps;
            let frozen = fokker_planck_1d(&mu, &rho0, gamma, dt, n, DriftMode::FrozenRatio)?;
            let exact = fokker_planck_1d(&mu, &rho0, gamma, dt, n, DriftMode::Exact)?;
            particle_vs_pde_distance(&frozen[n], &exact[n])
        })
        .collect()
}

fn fokker_planck_checks(seed: u64) -> Result<Vec<Verdict>> {
    let cross = fokker_planck_cross_check(seed)?;
    let worst_tv = cross.tv.iter().cloned().fold(0.0, f64::max);
    let mut details: Vec<(String, f64)> = cross
        .checkpoints
        .iter()
        .zip(&cross.tv)
        .map(|(s, tv)| (format!("tv_step_{s:03}"), *tv))
        .collect();
    details.push(("particles".into(), FP_PARTICLES as f64));
    let details: Vec<(&str, f64)> = details.iter().map(|(k, v)| (k.as_str(), *v)).collect();

    let etas = [0.1, 0.05, 0.01];
    let gaps = frozen_vs_exact(&etas)?;
    let shrinking = gaps.windows(2).all(|w| w[1] < w[0]);
    Ok(vec![
        verdict(
            Suite::FokkerPlanck,
            "fp-cross-check",
            cross.tv.len() == 5 && worst_tv < FP_TV_TOLERANCE,
            worst_tv,
            FP_TV_TOLERANCE,
            &details,
        ),
        verdict(
            Suite::FokkerPlanck,
            "fp-mass",
            cross.max_mass_error <= FP_MASS_TOLERANCE,
            cross.max_mass_error,
            FP_MASS_TOLERANCE,
            &[],
        ),
        verdict(
            Suite::FokkerPlanck,
            "fp-frozen-vs-exact",
            shrinking,
            gaps[gaps.len() - 1],
            gaps[0],
            &[("tv_eta_0.1", gaps[0]), ("tv_eta_0.05", gaps[1]), ("tv_eta_0.01", gaps[2])],
        ),
    ])
}

pub const GRADIENT_FIXTURES: usize = 50;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Random 6×6×4 grid with entries in `[-1, 1]` and 1 to 4 distinct prompts.
pub fn gradient_fixture<R: Rng + ?Sized>(rng: &mut R) -> (EmbeddingGrid, PromptSet) {
    let (h, w, c) = (6, 6, 4);
    let data = (0..h * w * c).map(|_| 2.0 * rng.sample::<f64, _>(StandardUniform) - 1.0).collect();
    let z = EmbeddingGrid::new(h, w, c, data).expect("finite fixture");
    let k = rng.random_range(1..=4);
    let points = sample_indices(rng, h * w, k).into_iter().map(|j| (j / w, j % w)).collect();
    (z, PromptSet::new(points).expect("distinct in-bounds prompts"))
}

/// `‖analytic - numeric‖_∞ / ‖numeric‖_∞` with central differences of step `h`.
pub fn gradient_relative_error(
    gradient: GradientFn,
    z: &EmbeddingGrid,
    prompts: &PromptSet,
    params: &DecoderParams,
    h: f64,
) -> Result<f64> {
    let analytic = gradient(z, prompts, params)?;
    let mut data = z.data().to_vec();
    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..data.len() {
        let x = data[i];
        data[i] = x + h;
        let plus = refinement_objective(&z.with_data(data.clone())?, prompts, params)?;
        data[i] = x - h;
        let minus = refinement_objective(&z.with_data(data.clone())?, prompts, params)?;
        data[i] = x;
        let numeric = (plus - minus) / (2.0 * h);
        err = err.max((analytic.values()[i] - numeric).abs());
        scale = scale.max(numeric.abs());
    }
    Ok(if scale == 0.0 { err } else { err / scale })
}

fn gradient_check(seed: u64, gradient: GradientFn) -> Result<Verdict> {
    let mut rng = rng::stream(seed, Domain::Lab, 4, 0);
    let params = DecoderParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..GRADIENT_FIXTURES {
        let (z, prompts) = gradient_fixture(&mut rng);
        worst = worst.max(gradient_relative_error(gradient, &z, &prompts, &params, GRADIENT_STEP)?);
    }
    Ok(verdict(
        Suite::Gradient,
        "gradient-fd",
        worst < GRADIENT_TOLERANCE,
        worst,
        GRADIENT_TOLERANCE,
        &[("fixtures", GRADIENT_FIXTURES as f64), ("fd_step", GRADIENT_STEP)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halved_gradient(z: &EmbeddingGrid, p: &PromptSet, params: &DecoderParams) -> Result<GradientVector> {
        let g = grad_refinement_objective(z, p, params)?;
        GradientVector::new(g.values().iter().map(|v| 0.5 * v).collect())
    }

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::All, Suite::Decay, Suite::Moment, Suite::FokkerPlanck, Suite::Gradient] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn selector_filters_families() {
        let report = run_verify(Suite::Decay, &VerifyOptions::default()).unwrap();
        assert!(!report.checks.is_empty());
        assert!(report.checks.iter().all(|c| c.family == Suite::Decay));
        assert!(report.passed);
    }

    #[test]
    fn gradient_check_passes_on_the_real_gradient() {
        let report = run_verify(Suite::Gradient, &VerifyOptions::default()).unwrap();
        assert!(report.passed, "{:?}", report.checks);
    }

    #[test]
    fn corrupted_gradient_fails_with_error_reported() {
        let opts = VerifyOptions {
            gradient: halved_gradient,
            ..VerifyOptions::default()
        };
        let report = run_verify(Suite::Gradient, &opts).unwrap();
        assert!(!report.passed);
        let check = &report.checks[0];
        assert!(check.measured > 0.4 && check.measured < 0.6, "rel err {}", check.measured);
    }

    #[test]
    fn fokker_planck_family_passes() {
        let report = run_verify(Suite::FokkerPlanck, &VerifyOptions::default()).unwrap();
        assert!(report.passed, "{:#?}", report.checks);
        assert_eq!(report.checks.len(), 3);
    }
}
