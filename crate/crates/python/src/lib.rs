//! Python bindings. Arrays cross the boundary as flat lists in the same
//! x-major order the Rust side uses (`index = i * ny + j`).

use std::path::PathBuf;

use offroad_irl::config::RunConfig;
use offroad_irl::costmodel::{cvar_cell, Ensemble as RsEnsemble};
use offroad_irl::dynamics::{rollout as rs_rollout, Control, KbmParams, Mode, State};
use offroad_irl::eval::{mhd as rs_mhd, occupancy_baseline, CostProvider};
use offroad_irl::gridmap::{GridMap as RsGridMap, CHANNEL_NAMES};
use offroad_irl::worldgen::{generate_world as rs_generate_world, World as RsWorld};
use offroad_irl::{io, selftest as rs_selftest, Costmap as RsCostmap, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        Error::Data(_) | Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Resolved run configuration with flat dotted keys.
#[pyclass]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    /// Set one key from its TOML text, e.g. `cfg.set("mppi.irl.samples", "512")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set_str(key, value).map_err(py_err)?;
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

#[pyclass]
struct World {
    inner: RsWorld,
}

#[pymethods]
impl World {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_world(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_world(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn extent(&self) -> f64 {
        self.inner.extent
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.resolution
    }

    /// Cells per side.
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    fn heightfield(&self) -> Vec<f32> {
        self.inner.heightfield.clone()
    }

    fn ground_truth_cost(&self) -> Vec<f32> {
        self.inner.ground_truth_cost.clone()
    }

    fn is_obstacle(&self, x: f64, y: f64) -> bool {
        self.inner.is_obstacle(x, y)
    }
}

#[pyclass]
struct GridMap {
    inner: RsGridMap,
}

#[pymethods]
impl GridMap {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_gridmap(&path).map_err(py_err)? })
    }

    /// `(nx, ny)`.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.meta.nx, self.inner.meta.ny)
    }

    #[getter]
    fn origin(&self) -> (f64, f64) {
        (self.inner.meta.origin[0], self.inner.meta.origin[1])
    }

    #[getter]
    fn resolution(&self) -> f64 {
        self.inner.meta.resolution
    }

    #[staticmethod]
    fn channel_names() -> Vec<&'static str> {
        CHANNEL_NAMES.to_vec()
    }

    fn channel(&self, name: &str) -> PyResult<Vec<f32>> {
        let c = CHANNEL_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown channel '{name}'")))?;
        Ok(self.inner.layer(offroad_irl::Channel::ALL[c]))
    }

    /// Occupancy-style baseline costmap.
    #[pyo3(signature = (threshold=0.5, inflation_radius=1.5))]
    fn occupancy(&self, threshold: f64, inflation_radius: f64) -> Costmap {
        Costmap { inner: occupancy_baseline(&self.inner, threshold, inflation_radius) }
    }
}

#[pyclass]
struct Costmap {
    inner: RsCostmap,
}

#[pymethods]
impl Costmap {
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.meta.nx, self.inner.meta.ny)
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.inner.at(x, y)
    }

    /// Write as max-normalized PGM plus raw f32 sidecar.
    fn save_pgm(&self, path: PathBuf) -> PyResult<()> {
        io::write_costmap_pgm(&path, &self.inner).map_err(py_err)
    }
}

/// A trained cost-model ensemble loaded from a checkpoint.
#[pyclass]
struct Ensemble {
    inner: RsEnsemble,
}

#[pymethods]
impl Ensemble {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_checkpoint(&path).map_err(py_err)? })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Per-member costmaps.
    fn predict_all(&self, map: &GridMap) -> PyResult<Vec<Costmap>> {
        let all = self.inner.predict_all(&map.inner).map_err(py_err)?;
        Ok(all.into_iter().map(|inner| Costmap { inner }).collect())
    }

    /// CVaR-aggregated costmap at risk level `nu` in [-1, 1].
    fn costmap(&self, map: &GridMap, nu: f64) -> PyResult<Costmap> {
        Ok(Costmap { inner: self.inner.costmap(&map.inner, nu).map_err(py_err)? })
    }
}

#[pyfunction]
#[pyo3(signature = (seed, config=None))]
fn generate_world(seed: u64, config: Option<&Config>) -> PyResult<World> {
    let cfg = config.map(|c| c.inner.world.clone()).unwrap_or_default();
    Ok(World { inner: rs_generate_world(seed, &cfg).map_err(py_err)? })
}

/// CVaR of one cell's member values at risk level `nu`.
#[pyfunction]
fn cvar(values: Vec<f64>, nu: f64) -> PyResult<f64> {
    if values.is_empty() || !(-1.0..=1.0).contains(&nu) {
        return Err(PyValueError::new_err("need at least one value and nu in [-1, 1]"));
    }
    Ok(cvar_cell(&values, nu, &mut Vec::new()))
}

/// Modified Hausdorff distance between two 2-D point lists.
#[pyfunction]
fn mhd(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    let a: Vec<[f64; 2]> = a.into_iter().map(|(x, y)| [x, y]).collect();
    let b: Vec<[f64; 2]> = b.into_iter().map(|(x, y)| [x, y]).collect();
    rs_mhd(&a, &b).map_err(py_err)
}

/// Roll the bicycle model out from `state = (x, y, theta, v, delta)` under
/// `(v_target, delta_target)` commands. `mode` is "irl" or "mpc".
#[pyfunction]
#[pyo3(signature = (state, controls, mode="irl"))]
fn rollout(state: (f64, f64, f64, f64, f64), controls: Vec<(f64, f64)>, mode: &str) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    let mode = match mode {
        "irl" => Mode::Irl,
        "mpc" => Mode::Mpc,
        other => return Err(PyValueError::new_err(format!("mode must be 'irl' or 'mpc', got '{other}'"))),
    };
    let params = KbmParams::default();
    let s0 = State::new(state.0, state.1, state.2, state.3, state.4);
    let us: Vec<Control> = controls.into_iter().map(|(v, d)| Control::new(v, d)).collect();
    let states = rs_rollout(&s0, &us, params.dt(mode), &params.vehicle(mode)).map_err(py_err)?;
    Ok(states.into_iter().map(|s| (s.x, s.y, s.theta, s.v, s.delta)).collect())
}

/// Run the built-in checks; returns `(name, passed, detail)` triples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    rs_selftest::run_all().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

/// Run the command-line interface in-process; returns the exit status.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    offroad_irl::cli::run(std::iter::once("offroad-irl".to_string()).chain(args))
}

#[pymodule]
fn offroad_irl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<World>()?;
    m.add_class::<GridMap>()?;
    m.add_class::<Costmap>()?;
    m.add_class::<Ensemble>()?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(cvar, m)?)?;
    m.add_function(wrap_pyfunction!(mhd, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
