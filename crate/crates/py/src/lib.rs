//! Python bindings for `flowrefine`.
//!
//! Masks cross the boundary as nested lists of booleans (rows of columns);
//! configs and reports can also be exchanged as JSON strings.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flowrefine::flow;
use flowrefine::harness::{run_experiment as run_experiment_rs, run_verify, Dataset, ExperimentConfig, Suite, VerifyOptions};
use flowrefine::lab::quadratic::{quadratic_flow_distance as distance_rs, QuadraticFlowSpec};
use flowrefine::refine::run_refinement as run_refinement_rs;
use flowrefine::selection::{select_oracle as select_oracle_rs, select_top1 as select_top1_rs};
use flowrefine::synth::{generate_sample as generate_sample_rs, iou as iou_rs};
use flowrefine::{BinaryMask, CandidateSet, DecoderParams, Error, GradientVector, ObjectKind, Sample, TaskSpec};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Json { .. }
        | Error::Validation(_)
        | Error::RejectedInput(_)
        | Error::Contract(_)
        | Error::DegeneratePrototype => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mask_to_rows(mask: &BinaryMask) -> Vec<Vec<bool>> {
    mask.values().chunks(mask.width()).map(|r| r.to_vec()).collect()
}

fn rows_to_mask(rows: Vec<Vec<bool>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must have equal length"));
    }
    BinaryMask::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py)
}

#[pyclass(name = "FlowConfig", module = "flowrefine_py", from_py_object)]
#[derive(Clone)]
struct PyFlowConfig {
    inner: flow::FlowConfig,
}

#[pymethods]
impl PyFlowConfig {
    #[new]
    #[pyo3(signature = (eta=1e-3, gamma=0.1, iterations=5, clip_norm=Some(1.0), prompt_count=8, seed=0))]
    fn new(eta: f64, gamma: f64, iterations: usize, clip_norm: Option<f64>, prompt_count: usize, seed: u64) -> PyResult<Self> {
        let inner = flow::FlowConfig {
            eta,
            gamma,
            iterations,
            clip_norm,
            prompt_count,
            seed,
        };
        inner.validate_allow_zero_step().map_err(to_py)?;
        Ok(PyFlowConfig { inner })
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn clip_norm(&self) -> Option<f64> {
        self.inner.clip_norm
    }

    #[getter]
    fn prompt_count(&self) -> usize {
        self.inner.prompt_count
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: flow::FlowConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate_allow_zero_step().map_err(to_py)?;
        Ok(PyFlowConfig { inner })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "FlowConfig(eta={}, gamma={}, iterations={}, clip_norm={:?}, prompt_count={}, seed={})",
            c.eta, c.gamma, c.iterations, c.clip_norm, c.prompt_count, c.seed
        )
    }
}

#[pyclass(name = "TaskSpec", module = "flowrefine_py", from_py_object)]
#[derive(Clone)]
struct PyTaskSpec {
    inner: TaskSpec,
}

#[pymethods]
impl PyTaskSpec {
    #[new]
    #[pyo3(signature = (
        grid_h=32, grid_w=32, channels=8, object_kind="blob", object_area_fraction=0.15,
        feature_noise_sigma=0.1, semantic_gap=0.2, distractor_count=2, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        object_kind: &str,
        object_area_fraction: f64,
        feature_noise_sigma: f64,
        semantic_gap: f64,
        distractor_count: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let object_kind = match object_kind {
            "blob" => ObjectKind::Blob,
            "rectangle" => ObjectKind::Rectangle,
            other => return Err(PyValueError::new_err(format!("unknown object_kind {other:?}"))),
        };
        let inner = TaskSpec {
            grid_h,
            grid_w,
            channels,
            object_kind,
            object_area_fraction,
            feature_noise_sigma,
            semantic_gap,
            distractor_count,
            seed,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyTaskSpec { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn semantic_gap(&self) -> f64 {
        self.inner.semantic_gap
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }
}

#[pyclass(name = "Sample", module = "flowrefine_py", from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// `(height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let q = &self.inner.query;
        (q.height(), q.width(), q.channels())
    }

    #[getter]
    fn query_gt(&self) -> Vec<Vec<bool>> {
        mask_to_rows(&self.inner.query_gt)
    }

    #[getter]
    fn support_mask(&self) -> Vec<Vec<bool>> {
        mask_to_rows(&self.inner.support_mask)
    }

    /// Query embedding, row-major with channels innermost.
    fn query_embedding(&self) -> Vec<f64> {
        self.inner.query.data().to_vec()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }
}

#[pyclass(name = "CandidateSet", module = "flowrefine_py", from_py_object)]
#[derive(Clone)]
struct PyCandidateSet {
    inner: CandidateSet,
}

#[pymethods]
impl PyCandidateSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ious(&self) -> Vec<Option<f64>> {
        self.inner.records.iter().map(|r| r.iou).collect()
    }

    fn scores(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.score).collect()
    }

    fn mask(&self, t: usize) -> PyResult<Vec<Vec<bool>>> {
        self.inner
            .records
            .get(t)
            .map(|r| mask_to_rows(&r.mask))
            .ok_or_else(|| PyValueError::new_err(format!("no candidate at t = {t}")))
    }

    fn prompts(&self, t: usize) -> PyResult<Vec<(usize, usize)>> {
        self.inner
            .records
            .get(t)
            .map(|r| r.prompts.points().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("no candidate at t = {t}")))
    }

    /// `(iteration, reason)` when refinement stopped early.
    #[getter]
    fn truncated(&self) -> Option<(usize, String)> {
        self.inner.truncated.as_ref().map(|t| (t.iteration, t.reason.clone()))
    }
}

#[pyfunction]
fn generate_sample(task: &PyTaskSpec) -> PyResult<PySample> {
    Ok(PySample {
        inner: generate_sample_rs(&task.inner).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (sample, flow, tau=0.1, bias=0.5))]
fn run_refinement(sample: &PySample, flow: &PyFlowConfig, tau: f64, bias: f64) -> PyResult<PyCandidateSet> {
    let params = DecoderParams { tau, bias };
    Ok(PyCandidateSet {
        inner: run_refinement_rs(&sample.inner, &flow.inner, &params).map_err(to_py)?,
    })
}

/// `(chosen_t, scores)` by support/query similarity.
#[pyfunction]
fn select_top1(candidates: &PyCandidateSet, sample: &PySample) -> PyResult<(usize, Vec<f64>)> {
    let r = select_top1_rs(&candidates.inner, &sample.inner).map_err(to_py)?;
    Ok((r.chosen_t, r.scores))
}

/// `(chosen_t, ious)` against the sample's ground truth.
#[pyfunction]
fn select_oracle(candidates: &PyCandidateSet, sample: &PySample) -> PyResult<(usize, Vec<f64>)> {
    let r = select_oracle_rs(&candidates.inner, &sample.inner.query_gt).map_err(to_py)?;
    Ok((r.chosen_t, r.scores))
}

#[pyfunction]
fn iou(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    iou_rs(&rows_to_mask(pred)?, &rows_to_mask(gt)?).map_err(to_py)
}

#[pyfunction]
fn density_ratio_from_logit(d: f64) -> PyResult<f64> {
    flow::density_ratio_from_logit(d).map_err(to_py)
}

#[pyfunction]
fn euler_maruyama_step(v: Vec<f64>, grad: Vec<f64>, eta: f64, gamma: f64, noise: Vec<f64>) -> PyResult<Vec<f64>> {
    let grad = GradientVector::new(grad).map_err(to_py)?;
    flow::euler_maruyama_step(&v, &grad, eta, gamma, &noise).map_err(to_py)
}

#[pyfunction]
fn clip_gradient(grad: Vec<f64>, max_norm: f64) -> PyResult<Vec<f64>> {
    let grad = GradientVector::new(grad).map_err(to_py)?;
    Ok(flow::clip_gradient(&grad, max_norm).into_values())
}

/// `‖ρ_t - μ*‖` for the linearized flow with Hessian `hessian` (list of rows).
#[pyfunction]
fn quadratic_flow_distance(hessian: Vec<Vec<f64>>, mu_star: Vec<f64>, rho0: Vec<f64>, t: f64) -> PyResult<f64> {
    let d = hessian.len();
    if hessian.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("hessian must be square"));
    }
    let h = DMatrix::from_fn(d, d, |i, j| hessian[i][j]);
    let spec = QuadraticFlowSpec::new(h, DVector::from_vec(mu_star), DVector::from_vec(rho0)).map_err(to_py)?;
    Ok(distance_rs(&spec, t))
}

/// Generate the dataset described by `config_json`, run it and return the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json="{}", jobs=1))]
fn run_experiment(py: Python<'_>, config_json: &str, jobs: usize) -> PyResult<String> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let report = py
        .detach(|| {
            cfg.validate()?;
            let ds = Dataset::generate(&cfg.task, cfg.num_samples)?;
            run_experiment_rs(&cfg, &ds, jobs)
        })
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Run a verification suite and return the verdicts as JSON.
#[pyfunction]
#[pyo3(signature = (suite="all", seed=0))]
fn verify(py: Python<'_>, suite: &str, seed: u64) -> PyResult<String> {
    let suite: Suite = suite.parse().map_err(to_py)?;
    let report = py
        .detach(|| {
            run_verify(
                suite,
                &VerifyOptions {
                    seed,
                    ..VerifyOptions::default()
                },
            )
        })
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn flowrefine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlowConfig>()?;
    m.add_class::<PyTaskSpec>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyCandidateSet>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(run_refinement, m)?)?;
    m.add_function(wrap_pyfunction!(select_top1, m)?)?;
    m.add_function(wrap_pyfunction!(select_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(density_ratio_from_logit, m)?)?;
    m.add_function(wrap_pyfunction!(euler_maruyama_step, m)?)?;
    m.add_function(wrap_pyfunction!(clip_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_flow_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
