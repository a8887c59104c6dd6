//! Python bindings. Matrices cross the boundary as lists of rows.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use freespec::attention::{self as attn, AttentionInputs, WindowSpec};
use freespec::fusion::{self, FusionMode, Stage};
use freespec::pipeline::{self, TrajectorySpec};
use freespec::report::{self, Precision, RunManifest};
use freespec::spectral;
use freespec::tensor_io::{self, Tensor, TensorData};
use freespec::{Error, ErrorKind};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Usage => PyValueError::new_err(msg),
        ErrorKind::Io => PyOSError::new_err(msg),
        ErrorKind::Numerical => PyArithmeticError::new_err(msg),
    }
}

/// Row lists to a matrix; every row must have the same length.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(Error::InvalidSize("matrix must be non-empty".into()));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::Shape(format!(
            "row {i} has {} entries, expected {cols}",
            rows[i].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    rows_to_matrix(&rows).map_err(to_py)
}

fn inputs(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<AttentionInputs<f64>> {
    AttentionInputs::new(matrix(q)?, matrix(k)?, matrix(v)?).map_err(to_py)
}

/// Scalar knobs of the fusion operator.
#[pyclass(name = "FusionConfig", module = "freespec_py")]
pub struct PyFusionConfig {
    inner: fusion::FusionConfig,
}

#[pymethods]
impl PyFusionConfig {
    #[new]
    #[pyo3(signature = (mode = "FREESPEC", tau = 0.9, t_max = 1.0, alpha = 5.0, beta = 5.0, a0 = 0.15, a1 = 0.2, ra_weight = 0.5, fixed_gamma = 0.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        tau: f64,
        t_max: f64,
        alpha: f64,
        beta: f64,
        a0: f64,
        a1: f64,
        ra_weight: f64,
        fixed_gamma: f64,
    ) -> PyResult<Self> {
        let inner = fusion::FusionConfig {
            t_max,
            tau,
            alpha,
            beta,
            a0,
            a1,
            mode: mode.parse().map_err(to_py)?,
            ra_weight,
            fixed_gamma,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }
    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }
    #[getter]
    fn t_max(&self) -> f64 {
        self.inner.t_max
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }
    #[getter]
    fn a0(&self) -> f64 {
        self.inner.a0
    }
    #[getter]
    fn a1(&self) -> f64 {
        self.inner.a1
    }

    /// True when `t` lies in the fusion stage `(tau, T]`.
    fn in_fusion_stage(&self, t: f64) -> bool {
        self.inner.in_fusion_stage(t)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "FusionConfig(mode={:?}, tau={}, t_max={}, alpha={}, beta={}, a0={}, a1={})",
            c.mode.name(),
            c.tau,
            c.t_max,
            c.alpha,
            c.beta,
            c.a0,
            c.a1
        )
    }
}

fn config(cfg: Option<PyRef<'_, PyFusionConfig>>) -> fusion::FusionConfig {
    cfg.map_or_else(fusion::FusionConfig::default, |c| c.inner)
}

/// Result of one fusion call.
#[pyclass(name = "FusionResult", module = "freespec_py", get_all)]
pub struct PyFusionResult {
    output: Vec<Vec<f64>>,
    /// "local", "global" or "fused".
    stage: &'static str,
    w_g: f64,
    a_t: f64,
}

impl From<fusion::FusionOutcome<f64>> for PyFusionResult {
    fn from(o: fusion::FusionOutcome<f64>) -> Self {
        Self {
            output: matrix_to_rows(&o.output),
            stage: match o.stage {
                Stage::LocalOnly => "local",
                Stage::GlobalOnly => "global",
                Stage::Fused => "fused",
            },
            w_g: o.schedule.map_or(0.0, |s| s.w_g),
            a_t: o.residual_weight,
        }
    }
}

#[pymethods]
impl PyFusionResult {
    fn __repr__(&self) -> String {
        format!(
            "FusionResult(stage={:?}, w_g={}, a_t={}, shape=({}, {}))",
            self.stage,
            self.w_g,
            self.a_t,
            self.output.len(),
            self.output.first().map_or(0, Vec::len)
        )
    }
}

#[pyfunction]
fn effective_rank(sigma: Vec<f64>) -> PyResult<f64> {
    spectral::effective_rank(&sigma).map_err(to_py)
}

#[pyfunction]
fn matrix_effective_rank(z: Vec<Vec<f64>>) -> PyResult<f64> {
    spectral::matrix_effective_rank(&matrix(z)?).map_err(to_py)
}

/// Thin SVD: returns `(u, sigma, v)` with `z = u @ diag(sigma) @ v.T`.
#[pyfunction]
fn svd(z: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let dec = spectral::svd(&matrix(z)?).map_err(to_py)?;
    Ok((
        matrix_to_rows(dec.u()),
        dec.sigma().to_vec(),
        matrix_to_rows(dec.v()),
    ))
}

/// Best low-rank reconstruction: returns `(z_k, k, tail_error)`.
#[pyfunction]
fn truncate(z: Vec<Vec<f64>>, keep_fraction: f64) -> PyResult<(Vec<Vec<f64>>, usize, f64)> {
    let dec = spectral::svd(&matrix(z)?).map_err(to_py)?;
    let k = spectral::retained_rank(dec.rank(), keep_fraction).map_err(to_py)?;
    Ok((
        matrix_to_rows(&dec.reconstruct_top(k)),
        k,
        spectral::tail_norm(&dec.sigma_f64(), k),
    ))
}

/// Banded attention: token i sees j when |i - j| <= window * multiple.
#[pyfunction]
#[pyo3(signature = (q, k, v, window, multiple = 1))]
fn local_branch(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    window: usize,
    multiple: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let win = WindowSpec::new(window, multiple).map_err(to_py)?;
    let out = attn::local_branch(&inputs(q, k, v)?, win).map_err(to_py)?;
    Ok(matrix_to_rows(&out))
}

#[pyfunction]
fn global_branch(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = attn::global_branch(&inputs(q, k, v)?).map_err(to_py)?;
    Ok(matrix_to_rows(&out))
}

/// Returns `(local, global)` branch outputs.
#[pyfunction]
#[pyo3(signature = (q, k, v, window, multiple = 1))]
#[allow(clippy::type_complexity)]
fn dual_branch(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    window: usize,
    multiple: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let win = WindowSpec::new(window, multiple).map_err(to_py)?;
    let b = attn::dual_branch(&inputs(q, k, v)?, win).map_err(to_py)?;
    Ok((matrix_to_rows(&b.local), matrix_to_rows(&b.global)))
}

#[pyfunction]
#[pyo3(signature = (t, config = None))]
fn progress(t: f64, config: Option<PyRef<'_, PyFusionConfig>>) -> PyResult<f64> {
    fusion::progress(t, &self::config(config)).map_err(to_py)
}

/// Returns `(w_l, w_g)`.
#[pyfunction]
fn branch_weights(p: f64, alpha: f64) -> PyResult<(f64, f64)> {
    fusion::branch_weights(p, alpha).map_err(to_py)
}

#[pyfunction]
fn rank_coefficients(w_g: f64, beta: f64, r: usize) -> PyResult<Vec<f64>> {
    fusion::rank_coefficients(w_g, beta, r).map_err(to_py)
}

/// Fuses precomputed local and global branch outputs.
#[pyfunction]
#[pyo3(signature = (local, global, t, config = None))]
fn fuse_branches(
    local: Vec<Vec<f64>>,
    global: Vec<Vec<f64>>,
    t: f64,
    config: Option<PyRef<'_, PyFusionConfig>>,
) -> PyResult<PyFusionResult> {
    let out = fusion::fuse_branches(&matrix(local)?, &matrix(global)?, t, &self::config(config))
        .map_err(to_py)?;
    Ok(out.into())
}

/// End-to-end operator: attention branches, then spectrum fusion.
#[pyfunction]
#[pyo3(signature = (q, k, v, t, window, multiple = 1, config = None))]
fn freespec_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: f64,
    window: usize,
    multiple: usize,
    config: Option<PyRef<'_, PyFusionConfig>>,
) -> PyResult<PyFusionResult> {
    let win = WindowSpec::new(window, multiple).map_err(to_py)?;
    let out = fusion::freespec_attention(&inputs(q, k, v)?, win, t, &self::config(config))
        .map_err(to_py)?;
    Ok(out.into())
}

/// Reads an FST1 file: returns `(dims, row-major values, dtype name)`.
#[pyfunction]
fn read_tensor(path: &str) -> PyResult<(Vec<usize>, Vec<f64>, &'static str)> {
    let t = tensor_io::read_tensor(path).map_err(to_py)?;
    let values = match t.data() {
        TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        TensorData::F64(v) => v.clone(),
    };
    Ok((t.dims().to_vec(), values, t.dtype().name()))
}

#[pyfunction]
#[pyo3(signature = (path, dims, values, dtype = "f64"))]
fn write_tensor(path: &str, dims: Vec<usize>, values: Vec<f64>, dtype: &str) -> PyResult<()> {
    let data = match dtype {
        "f64" => TensorData::F64(values),
        "f32" => TensorData::F32(values.iter().map(|&x| x as f32).collect()),
        other => {
            return Err(PyValueError::new_err(format!(
                "dtype must be f32 or f64, got {other:?}"
            )))
        }
    };
    let t = Tensor::new(dims, data).map_err(to_py)?;
    tensor_io::write_tensor(path, &t).map_err(to_py)
}

/// Effective-rank sweep on the default surrogate trajectory. Returns rows
/// `(timestep, window_multiple, seed, effective_rank)`.
#[pyfunction]
#[pyo3(signature = (multiples, seeds, timesteps = None))]
fn sweep_windows(
    multiples: Vec<usize>,
    seeds: Vec<u64>,
    timesteps: Option<Vec<f64>>,
) -> PyResult<Vec<(f64, usize, u64, f64)>> {
    let mut spec = TrajectorySpec::default();
    if let Some(ts) = timesteps {
        spec.timesteps = ts;
    }
    let report = pipeline::sweep_windows::<f64>(&spec, &multiples, &seeds).map_err(to_py)?;
    Ok(report
        .rows
        .iter()
        .map(|r| (r.timestep, r.window_multiple, r.seed, r.effective_rank))
        .collect())
}

/// Runs fusion modes along the default surrogate; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (modes, seeds, window_multiple = 1))]
fn run_demo(
    py: Python<'_>,
    modes: Vec<String>,
    seeds: Vec<u64>,
    window_multiple: usize,
) -> PyResult<String> {
    let modes = modes
        .iter()
        .map(|m| m.parse::<FusionMode>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let manifest = RunManifest {
        seeds,
        modes,
        window_multiples: vec![window_multiple],
        ..RunManifest::new("demo", Precision::F64)
    };
    py.detach(|| report::run_demo(&manifest).and_then(|r| r.to_json()))
        .map_err(to_py)
}

#[pymodule]
fn freespec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", report::TOOL_VERSION)?;
    m.add(
        "FUSION_MODES",
        FusionMode::ALL.map(FusionMode::name).to_vec(),
    )?;
    m.add_class::<PyFusionConfig>()?;
    m.add_class::<PyFusionResult>()?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(local_branch, m)?)?;
    m.add_function(wrap_pyfunction!(global_branch, m)?)?;
    m.add_function(wrap_pyfunction!(dual_branch, m)?)?;
    m.add_function(wrap_pyfunction!(progress, m)?)?;
    m.add_function(wrap_pyfunction!(branch_weights, m)?)?;
    m.add_function(wrap_pyfunction!(rank_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_branches, m)?)?;
    m.add_function(wrap_pyfunction!(freespec_attention, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_windows, m)?)?;
    m.add_function(wrap_pyfunction!(run_demo, m)?)?;
    Ok(())
}
