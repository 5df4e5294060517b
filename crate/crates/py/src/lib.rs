//! Python bindings for the latent-sde pipeline.
//!
//! Exposes the four pipeline stages with plain Python types: `simulate`
//! returns a [`Trajectory`], `embed` turns it into a [`Dataset`], `train`
//! fits a [`Model`] on the frames, and `evaluate` scores the recovered
//! dynamics as a dict. `estimate_fields` gives direct access to the frozen
//! kernel estimator, and `echo_server` / `protocol_check` cover the remote
//! estimator handshake.
//!
//! Build with `cargo build -p latent-sde-py`; the importable module is the
//! produced `liblatent_sde_py.so` renamed to `latent_sde_py.so` (see
//! `python/smoke_test.py` for a loader).

use std::path::PathBuf;
use std::time::Duration;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyConnectionError, PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use latent_sde::embedding::{embed_trajectory, BlobConfig, VideoDataset};
use latent_sde::estimator::{estimate, remote, EstimatorContext};
use latent_sde::eval::{evaluate_run, EvalConfig};
use latent_sde::nn::{AdamHyper, AutoencoderParams};
use latent_sde::sde::{double_well_system, euler_maruyama, SimConfig, Trajectory as CoreTrajectory};
use latent_sde::training::{train as train_impl, EstimatorKind, TrainConfig};
use latent_sde::{artifact, Error};

fn to_py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) => PyValueError::new_err(msg),
        Error::Io(_) => PyIOError::new_err(msg),
        Error::Protocol(_) => PyConnectionError::new_err(msg),
        Error::Numeric(_) | Error::Collapse(_) => PyRuntimeError::new_err(msg),
    }
}

/// Packs a list of equal-length rows into a matrix.
fn to_matrix(name: &str, rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(PyValueError::new_err(format!(
            "{name} must be a non-empty list of non-empty rows"
        )));
    }
    let mut flat = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(PyValueError::new_err(format!("{name} rows have mixed lengths")));
        }
        flat.extend_from_slice(row);
    }
    Array2::from_shape_vec((rows.len(), width), flat)
        .map_err(|e| PyValueError::new_err(format!("{name}: {e}")))
}

fn matrix_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|row| row.to_vec()).collect()
}

fn cube_rows(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter().map(|slab| matrix_rows(&slab.to_owned())).collect()
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (key, item) in map {
                dict.set_item(key, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn estimator_kind(endpoint: Option<String>) -> EstimatorKind {
    match endpoint {
        Some(endpoint) => EstimatorKind::Remote {
            endpoint,
            timeout_ms: remote::DEFAULT_TIMEOUT.as_millis() as u64,
        },
        None => EstimatorKind::Local,
    }
}

/// A simulated latent trajectory: `len` states of dimension `dim`, `dt` apart.
#[pyclass(frozen, module = "latent_sde_py")]
pub struct Trajectory {
    inner: CoreTrajectory,
}

#[pymethods]
impl Trajectory {
    /// Builds a trajectory from explicit states (one row per time point).
    #[staticmethod]
    #[pyo3(signature = (states, dt, seed=None))]
    fn from_states(states: Vec<Vec<f64>>, dt: f64, seed: Option<u64>) -> PyResult<Self> {
        let m = to_matrix("states", &states)?;
        let (_, dim) = m.dim();
        let inner = CoreTrajectory::from_flat(dim, dt, m.into_raw_vec_and_offset().0, seed)
            .map_err(to_py_err)?;
        Ok(Trajectory { inner })
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.inner.seed()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// All states as a list of rows.
    fn states(&self) -> Vec<Vec<f64>> {
        self.inner.states().map(<[f64]>::to_vec).collect()
    }

    /// One coordinate of every state, as a flat list.
    fn component(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.inner.dim() {
            return Err(PyIndexError::new_err(format!(
                "component {k} out of range for dimension {}",
                self.inner.dim()
            )));
        }
        Ok(self.inner.component(k))
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory(len={}, dim={}, dt={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.dt()
        )
    }
}

/// A rendered video dataset; frames are flattened row-major pixel rows.
#[pyclass(frozen, module = "latent_sde_py")]
pub struct Dataset {
    inner: VideoDataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    /// (height, width) of each frame.
    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.grid_h(), self.inner.grid_w())
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }

    /// One frame as a flat pixel list of length `grid[0] * grid[1]`.
    fn frame(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_frames() {
            return Err(PyIndexError::new_err(format!(
                "frame {i} out of range for {} frames",
                self.inner.n_frames()
            )));
        }
        Ok(self.inner.frame(i).to_vec())
    }

    /// Every frame; rows are flat pixel lists. Large for full-size datasets.
    fn frames(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.inner.frames().to_owned())
    }

    /// The latent trajectory this dataset was rendered from, if retained.
    fn source_latent(&self) -> Option<Trajectory> {
        self.inner.source_latent().map(|t| Trajectory { inner: t.clone() })
    }

    /// Writes the dataset as a JSON header plus binary payload sidecar.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        artifact::save_dataset(&self.inner, &path, None).map_err(to_py_err)
    }

    /// Loads a dataset saved by `save` or by the `latent-sde embed` command.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = artifact::load_dataset(&path).map_err(to_py_err)?;
        Ok(Dataset { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_frames={}, grid=({}, {}), dt={})",
            self.inner.n_frames(),
            self.inner.grid_h(),
            self.inner.grid_w(),
            self.inner.dt()
        )
    }
}

/// A trained encoder-decoder pair.
#[pyclass(frozen, module = "latent_sde_py")]
pub struct Model {
    inner: AutoencoderParams,
}

#[pymethods]
impl Model {
    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn observation_dim(&self) -> usize {
        self.inner.observation_dim()
    }

    /// Encodes a batch of flat frames into latent rows.
    fn encode(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = to_matrix("frames", &frames)?;
        if m.ncols() != self.inner.observation_dim() {
            return Err(PyValueError::new_err(format!(
                "frames have {} pixels, model expects {}",
                m.ncols(),
                self.inner.observation_dim()
            )));
        }
        Ok(matrix_rows(&self.inner.encode_batch(m.view())))
    }

    /// Decodes a batch of latent rows back into flat frames.
    fn decode(&self, latents: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = to_matrix("latents", &latents)?;
        if m.ncols() != self.inner.latent_dim() {
            return Err(PyValueError::new_err(format!(
                "latents have dimension {}, model expects {}",
                m.ncols(),
                self.inner.latent_dim()
            )));
        }
        Ok(matrix_rows(&self.inner.decode_batch(m.view())))
    }

    /// Loads a checkpoint written by the `latent-sde train` command.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = artifact::load_checkpoint(&path).map_err(to_py_err)?;
        Ok(Model { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(observation_dim={}, latent_dim={}, n_params={})",
            self.inner.observation_dim(),
            self.inner.latent_dim(),
            self.inner.n_params()
        )
    }
}

/// An in-process HTTP double implementing the remote estimator protocol.
///
/// It echoes each query back as its drift and answers unit squared
/// diffusion: enough to exercise the wire format and `protocol_check`,
/// not a substitute for the real kernel estimator.
#[pyclass(module = "latent_sde_py")]
pub struct EchoServer {
    inner: Option<remote::EchoServer>,
}

#[pymethods]
impl EchoServer {
    #[new]
    fn new() -> PyResult<Self> {
        let inner = remote::EchoServer::spawn().map_err(to_py_err)?;
        Ok(EchoServer { inner: Some(inner) })
    }

    #[getter]
    fn endpoint(&self) -> PyResult<String> {
        self.inner
            .as_ref()
            .map(remote::EchoServer::endpoint)
            .ok_or_else(|| PyRuntimeError::new_err("server already closed"))
    }

    /// Stops the server; the endpoint is unusable afterwards.
    fn close(&mut self) {
        self.inner = None;
    }

    fn __enter__(slf: PyRef<'_, Self>) -> PyRef<'_, Self> {
        slf
    }

    #[pyo3(signature = (*_args))]
    fn __exit__(&mut self, _args: &Bound<'_, pyo3::types::PyTuple>) -> bool {
        self.close();
        false
    }
}

/// Simulates the double-well SDE with Euler-Maruyama.
///
/// `n_steps` counts stored states including the initial one.
#[pyfunction]
#[pyo3(signature = (n_steps, dt=0.002, x0=vec![0.0], seed=0))]
fn simulate(n_steps: usize, dt: f64, x0: Vec<f64>, seed: u64) -> PyResult<Trajectory> {
    let cfg = SimConfig { dt, n_steps, x0, seed };
    let system = double_well_system();
    euler_maruyama(&system, &cfg).map(|inner| Trajectory { inner }).map_err(to_py_err)
}

/// Renders a 1D trajectory as frames of a moving Gaussian blob.
///
/// `center` defaults to the grid midpoint; the blob sits there at x = 0 and
/// moves `scale_px` pixels per latent unit along the row axis.
#[pyfunction]
#[pyo3(signature = (traj, grid_h=51, grid_w=51, sigma_px=2.5, scale_px=10.0, amplitude=1.0, center=None))]
fn embed(
    traj: &Trajectory,
    grid_h: usize,
    grid_w: usize,
    sigma_px: f64,
    scale_px: f64,
    amplitude: f64,
    center: Option<(f64, f64)>,
) -> PyResult<Dataset> {
    let (center_row, center_col) = center.unwrap_or((
        grid_h.saturating_sub(1) as f64 / 2.0,
        grid_w.saturating_sub(1) as f64 / 2.0,
    ));
    let cfg = BlobConfig { grid_h, grid_w, sigma_px, scale_px, center_row, center_col, amplitude };
    embed_trajectory(&traj.inner, &cfg).map(|inner| Dataset { inner }).map_err(to_py_err)
}

/// Kramers-Moyal kernel estimates of drift and squared diffusion.
///
/// `pairs_x` and `pairs_x_next` are consecutive-state rows `dt` apart;
/// `queries` are the evaluation points. Returns a dict with `drift`,
/// `diff_sq`, and `fallback_queries` (indices that underflowed every kernel
/// weight); with `with_grad`, also `drift_jac` and `diff_sq_jac`.
#[pyfunction]
#[pyo3(signature = (pairs_x, pairs_x_next, dt, queries, with_grad=false))]
fn estimate_fields(
    py: Python<'_>,
    pairs_x: Vec<Vec<f64>>,
    pairs_x_next: Vec<Vec<f64>>,
    dt: f64,
    queries: Vec<Vec<f64>>,
    with_grad: bool,
) -> PyResult<Py<PyDict>> {
    let x = to_matrix("pairs_x", &pairs_x)?;
    let x_next = to_matrix("pairs_x_next", &pairs_x_next)?;
    if x.dim() != x_next.dim() {
        return Err(PyValueError::new_err(format!(
            "pairs_x is {:?} but pairs_x_next is {:?}",
            x.dim(),
            x_next.dim()
        )));
    }
    let q = to_matrix("queries", &queries)?;
    let ctx = EstimatorContext::from_pairs(x, x_next.view(), dt).map_err(to_py_err)?;
    let fields = estimate(&ctx, q.view(), with_grad).map_err(to_py_err)?;

    let out = PyDict::new(py);
    out.set_item("drift", matrix_rows(&fields.drift))?;
    out.set_item("diff_sq", matrix_rows(&fields.diff_sq))?;
    out.set_item("fallback_queries", fields.flags)?;
    if let Some(jac) = &fields.drift_jac {
        out.set_item("drift_jac", cube_rows(jac))?;
    }
    if let Some(jac) = &fields.diff_sq_jac {
        out.set_item("diff_sq_jac", cube_rows(jac))?;
    }
    Ok(out.unbind())
}

/// Trains an encoder-decoder pair under the dynamics-constrained loss.
///
/// Only the autoencoder parameters move; drift and diffusion in the loss
/// come from the frozen kernel estimator (local, or remote via `endpoint`).
/// Returns the trained model and the per-step loss history.
#[pyfunction]
#[pyo3(signature = (
    dataset, steps=300, batch_size=256, context_size=1024, context_refresh_every=1,
    lr=1e-3, grad_through_estimator=true, latent_dim=1, hidden=(128, 64), seed=0,
    endpoint=None,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &Dataset,
    steps: usize,
    batch_size: usize,
    context_size: usize,
    context_refresh_every: usize,
    lr: f64,
    grad_through_estimator: bool,
    latent_dim: usize,
    hidden: (usize, usize),
    seed: u64,
    endpoint: Option<String>,
) -> PyResult<(Model, Vec<f64>)> {
    let cfg = TrainConfig {
        steps,
        batch_size,
        context_size,
        context_refresh_every,
        adam: AdamHyper { lr, ..AdamHyper::default() },
        grad_through_estimator,
        seed,
        latent_dim,
        hidden,
        estimator: estimator_kind(endpoint),
    };
    let (params, trace) = train_impl(&dataset.inner, &cfg).map_err(to_py_err)?;
    Ok((Model { inner: params }, trace.losses().collect()))
}

/// Scores a trained model against the dataset's source latent trajectory.
///
/// Returns the full run report as a dict: gauge alignment, latent
/// correlation, field RMSEs, drift zero crossings, per-pixel reconstruction
/// MSE, and the estimated curves on the evaluation grid.
#[pyfunction]
#[pyo3(signature = (
    model, dataset, seed=0, grid_min=None, grid_max=None, grid_points=None,
    max_context_pairs=None, context_seed=0, endpoint=None,
))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    model: &Model,
    dataset: &Dataset,
    seed: u64,
    grid_min: Option<f64>,
    grid_max: Option<f64>,
    grid_points: Option<usize>,
    max_context_pairs: Option<usize>,
    context_seed: u64,
    endpoint: Option<String>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = EvalConfig::default();
    if let Some(v) = grid_min {
        cfg.grid.min = v;
    }
    if let Some(v) = grid_max {
        cfg.grid.max = v;
    }
    if let Some(v) = grid_points {
        cfg.grid.points = v;
    }
    if let Some(v) = max_context_pairs {
        cfg.max_context_pairs = v;
    }
    cfg.context_seed = context_seed;
    let report = evaluate_run(
        &model.inner,
        &dataset.inner,
        &double_well_system(),
        &estimator_kind(endpoint),
        &cfg,
        seed,
    )
    .map_err(to_py_err)?;
    let value = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

/// Ground-truth drift and squared diffusion of the double well at `xs`.
#[pyfunction]
fn true_fields(xs: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let system = double_well_system();
    xs.iter().map(|&x| (system.drift_at(&[x])[0], system.diffusion_sq_at(&[x])[0])).unzip()
}

/// Runs the remote-estimator handshake against `endpoint`.
///
/// Sends a canned request and checks shape, units, and the diffusion floor;
/// raises ConnectionError if the endpoint is unreachable or noncompliant.
#[pyfunction]
#[pyo3(signature = (endpoint, timeout_ms=10_000))]
fn protocol_check(endpoint: &str, timeout_ms: u64) -> PyResult<()> {
    remote::protocol_check(endpoint, Duration::from_millis(timeout_ms))
        .map(|_| ())
        .map_err(to_py_err)
}

#[pymodule]
fn latent_sde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trajectory>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<EchoServer>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_fields, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(true_fields, m)?)?;
    m.add_function(wrap_pyfunction!(protocol_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
