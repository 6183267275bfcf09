//! Python bindings.

use std::path::PathBuf;

use agentformer_core::checkpoint;
use agentformer_core::config::ModelConfig;
use agentformer_core::cvae::AgentFormer;
use agentformer_core::data::{self, AgentId, Scene, SyntheticKind};
use agentformer_core::metrics::{self, Distance, SampleSet};
use agentformer_core::train::{self, EpochLog};
use agentformer_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(agentformer, AgentFormerError, PyException);
create_exception!(agentformer, DivergenceError, AgentFormerError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } => DivergenceError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape { .. } | Error::Domain { .. } => PyValueError::new_err(e.to_string()),
        e => AgentFormerError::new_err(e.to_string()),
    }
}

type Track = Vec<(f64, f64)>;

fn pairs(v: &[[f64; 2]]) -> Track {
    v.iter().map(|p| (p[0], p[1])).collect()
}

fn points(v: &[(f64, f64)]) -> Vec<[f64; 2]> {
    v.iter().map(|p| [p.0, p.1]).collect()
}

/// Model hyperparameters; `preset` is `"default"`, `"desk"` or `"tiny"`.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "default" => ModelConfig::default(),
            "desk" => ModelConfig::desk(),
            "tiny" => ModelConfig::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok(PyModelConfig { inner })
    }

    /// Sets one `key = value` entry of the text format.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let text = format!("{}\n{key} = {value}\n", self.inner.to_text());
        self.inner = ModelConfig::from_text(&text).map_err(to_py)?;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: ModelConfig::from_text(text).map_err(to_py)?,
        })
    }

    #[getter]
    fn past_horizon(&self) -> usize {
        self.inner.past_horizon
    }

    #[getter]
    fn future_horizon(&self) -> usize {
        self.inner.future_horizon
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn sampler_epochs(&self) -> usize {
        self.inner.sampler_epochs
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(H={}, T={}, time_dim={}, heads={}, latent_dim={})",
            self.inner.past_horizon, self.inner.future_horizon, self.inner.time_dim, self.inner.heads, self.inner.latent_dim
        )
    }
}

/// One multi-agent window. `past[n]` runs from `t = -H` to `t = 0` with
/// `None` for missing observations; `future[n]` holds steps `1..=T`.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    #[new]
    fn new(agents: Vec<i64>, past: Vec<Vec<Option<(f64, f64)>>>, future: Vec<Track>) -> PyResult<Self> {
        let past = past
            .into_iter()
            .map(|track| track.into_iter().map(|p| p.map(|p| [p.0, p.1])).collect())
            .collect();
        let future = future.iter().map(|t| points(t)).collect();
        let inner = Scene::new(agents.into_iter().map(AgentId).collect(), past, future).map_err(to_py)?;
        Ok(PyScene { inner })
    }

    #[getter]
    fn agents(&self) -> Vec<i64> {
        self.inner.agents.iter().map(|a| a.0).collect()
    }

    #[getter]
    fn past(&self) -> Vec<Vec<Option<(f64, f64)>>> {
        self.inner
            .past
            .iter()
            .map(|t| t.iter().map(|p| p.map(|p| (p[0], p[1]))).collect())
            .collect()
    }

    #[getter]
    fn future(&self) -> Vec<Track> {
        self.inner.future.iter().map(|t| pairs(t)).collect()
    }

    #[getter]
    fn origin(&self) -> (f64, f64) {
        (self.inner.origin[0], self.inner.origin[1])
    }

    #[getter]
    fn source(&self) -> String {
        self.inner.source.clone()
    }

    fn num_agents(&self) -> usize {
        self.inner.num_agents()
    }

    /// Copy translated so the mean position at `t = 0` is the origin.
    fn centered(&self) -> PyScene {
        PyScene {
            inner: data::scene_center(&self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(agents={}, H={}, T={}, source={:?})",
            self.inner.num_agents(),
            self.inner.past_horizon(),
            self.inner.future_horizon(),
            self.inner.source
        )
    }
}

fn scenes_of(scenes: &[PyRef<'_, PyScene>]) -> Vec<Scene> {
    scenes.iter().map(|s| s.inner.clone()).collect()
}

fn log_dict<'py>(py: Python<'py>, l: &EpochLog) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stage", l.stage)?;
    d.set_item("epoch", l.epoch)?;
    d.set_item("lr", l.lr)?;
    d.set_item("loss", l.loss)?;
    d.set_item("recon", l.recon)?;
    d.set_item("kl", l.kl)?;
    d.set_item("extra", l.extra)?;
    d.set_item("clipped_steps", l.clipped_steps)?;
    d.set_item("seconds", l.seconds)?;
    Ok(d)
}

/// The trajectory model with its optional trained sampler.
#[pyclass(name = "AgentFormer", unsendable)]
struct PyAgentFormer {
    inner: AgentFormer,
}

#[pymethods]
impl PyAgentFormer {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyAgentFormer {
            inner: AgentFormer::new(config.inner.clone(), seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    #[getter]
    fn has_sampler(&self) -> bool {
        self.inner.sampler.is_some()
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    /// Trains the CVAE; returns one dict per epoch.
    #[pyo3(signature = (scenes, seed = 0, verbose = false))]
    fn train_cvae<'py>(
        &mut self,
        py: Python<'py>,
        scenes: Vec<PyRef<'py, PyScene>>,
        seed: u64,
        verbose: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let scenes = scenes_of(&scenes);
        let logs = train::train_cvae(&mut self.inner, &scenes, seed, &mut |l| {
            if verbose {
                println!("{}", l.csv_row());
            }
        })
        .map_err(to_py)?;
        logs.iter().map(|l| log_dict(py, l)).collect()
    }

    /// Trains the sampler with the CVAE frozen; returns one dict per epoch.
    #[pyo3(signature = (scenes, seed = 0, verbose = false))]
    fn train_sampler<'py>(
        &mut self,
        py: Python<'py>,
        scenes: Vec<PyRef<'py, PyScene>>,
        seed: u64,
        verbose: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let scenes = scenes_of(&scenes);
        let logs = train::train_sampler(&mut self.inner, &scenes, seed, &mut |l| {
            if verbose {
                println!("{}", l.csv_row());
            }
        })
        .map_err(to_py)?;
        logs.iter().map(|l| log_dict(py, l)).collect()
    }

    /// `k` futures as nested lists `[k][agent][step] -> (x, y)` in the
    /// scene's coordinates.
    #[pyo3(signature = (scene, k = 20, seed = 0, use_sampler = true))]
    fn predict(&self, scene: &PyScene, k: usize, seed: u64, use_sampler: bool) -> PyResult<Vec<Vec<Track>>> {
        let set = self.inner.predict(&scene.inner, k, seed, use_sampler).map_err(to_py)?;
        Ok(set.samples.iter().map(|s| s.iter().map(|t| pairs(t)).collect()).collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyAgentFormer {
            inner: checkpoint::load(&path).map_err(to_py)?,
        })
    }
}

fn kinds(names: Option<Vec<String>>) -> PyResult<Vec<SyntheticKind>> {
    match names {
        None => Ok(SyntheticKind::ALL.to_vec()),
        Some(names) => names.iter().map(|n| n.parse().map_err(to_py)).collect(),
    }
}

/// Synthetic scenes drawn from the given scenario kinds (all by default).
#[pyfunction]
#[pyo3(signature = (n, seed = 0, noise = 0.05, past_horizon = 7, future_horizon = 12, kinds = None))]
fn generate_synthetic(
    n: usize,
    seed: u64,
    noise: f64,
    past_horizon: usize,
    future_horizon: usize,
    kinds: Option<Vec<String>>,
) -> PyResult<Vec<PyScene>> {
    let kinds = self::kinds(kinds)?;
    let scenes = data::generate_mixed(&kinds, n, noise, seed, past_horizon, future_horizon).map_err(to_py)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Sliding-window scenes from a `frame agent x y` text file.
#[pyfunction]
#[pyo3(signature = (path, past_horizon = 7, future_horizon = 12, stride = 1))]
fn load_scenes(path: PathBuf, past_horizon: usize, future_horizon: usize, stride: usize) -> PyResult<Vec<PyScene>> {
    let records = data::load_trajectory_file(&path).map_err(to_py)?;
    let scenes = data::build_scenes(&records, past_horizon, future_horizon, stride).map_err(to_py)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Best-of-K `(ade, fde)` averaged over agents.
#[pyfunction]
#[pyo3(signature = (samples, truth, squared = false))]
fn ade_fde(samples: Vec<Vec<Track>>, truth: Vec<Track>, squared: bool) -> PyResult<(f64, f64)> {
    let set = SampleSet::new(samples.iter().map(|s| s.iter().map(|t| points(t)).collect()).collect()).map_err(to_py)?;
    let truth: Vec<Vec<[f64; 2]>> = truth.iter().map(|t| points(t)).collect();
    let distance = if squared { Distance::Squared } else { Distance::Euclidean };
    let r = metrics::ade_fde(&set, &truth, distance).map_err(to_py)?;
    Ok((r.ade, r.fde))
}

/// Constant-velocity extrapolation as a one-sample set.
#[pyfunction]
fn constant_velocity(scene: &PyScene) -> Vec<Vec<Track>> {
    let set = metrics::constant_velocity_baseline(&scene.inner);
    set.samples.iter().map(|s| s.iter().map(|t| pairs(t)).collect()).collect()
}

#[pymodule]
fn agentformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyAgentFormer>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(ade_fde, m)?)?;
    m.add_function(wrap_pyfunction!(constant_velocity, m)?)?;
    m.add("AgentFormerError", m.py().get_type::<AgentFormerError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
