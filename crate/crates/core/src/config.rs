//! Run configuration: one flat tree of dotted keys with the vehicle and
//! planner tables as defaults.
//!
//! Files are TOML; nested tables and quoted dotted keys both flatten to the
//! same names (`[mppi.irl] samples = 2048` is `mppi.irl.samples`).

use std::path::Path;

use toml::Value;

use crate::costmodel::{AdamConfig, ModelKind, DEFAULT_ENSEMBLE_SIZE};
use crate::dynamics::{KbmParams, Mode};
use crate::error::{Error, Result};
use crate::eval::{NavConfig, Occupancy};
use crate::gridmap::MappingConfig;
use crate::irl::TrainConfig;
use crate::mppi::MppiConfig;
use crate::worldgen::{DatasetConfig, ExpertConfig, SensorConfig, WorldConfig};

/// Sampling-controller settings independent of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    pub samples: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub goal_weight: f64,
    pub temperature: f64,
    pub noise_var_v: f64,
    pub noise_var_delta: f64,
    pub alpha: f64,
    pub ou_rate: f64,
    pub ou_clamp: f64,
}

impl PlannerParams {
    fn from_config(c: &MppiConfig) -> Self {
        Self {
            samples: c.samples,
            horizon: c.horizon,
            iterations: c.iterations,
            goal_weight: c.goal_weight,
            temperature: c.temperature,
            noise_var_v: c.noise_var[0],
            noise_var_delta: c.noise_var[1],
            alpha: c.alpha,
            ou_rate: c.ou_rate,
            ou_clamp: c.ou_clamp,
        }
    }

    fn resolve(&self, kbm: &KbmParams, mode: Mode) -> MppiConfig {
        MppiConfig {
            samples: self.samples,
            horizon: self.horizon,
            iterations: self.iterations,
            goal_weight: self.goal_weight,
            temperature: self.temperature,
            noise_var: [self.noise_var_v, self.noise_var_delta],
            alpha: self.alpha,
            ou_rate: self.ou_rate,
            ou_clamp: self.ou_clamp,
            dt: kbm.dt(mode),
            vehicle: kbm.vehicle(mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub planner: PlannerParams,
    pub v_max: f64,
    pub noise_var_v: f64,
    pub noise_var_delta: f64,
    pub reach_radius: f64,
    pub max_steps: usize,
    pub lookahead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub demos: usize,
    pub window_stride: usize,
    pub buffer_len: usize,
    pub skip: usize,
    pub k_overhang: f64,
    pub map_length: f64,
    pub map_resolution: f64,
    pub test_fraction: f64,
    pub min_distance: f64,
    pub max_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub members: usize,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub patience: usize,
    pub val_samples: usize,
    pub val_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub nu: f64,
    pub seeds: Vec<u64>,
    pub occupancy_threshold: f64,
    pub inflation_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavParams {
    pub waypoint_spacing: f64,
    pub waypoints: usize,
    pub buffer_len: usize,
    pub reach_radius: f64,
    pub max_steps: usize,
    pub teleport_distance: f64,
    pub teleport_clearance: f64,
    pub leg_budget_factor: f64,
    pub snapshots: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub sensor: SensorConfig,
    pub kbm: KbmParams,
    pub mppi_irl: PlannerParams,
    pub mppi_mpc: PlannerParams,
    pub expert: ExpertParams,
    pub dataset: DatasetParams,
    pub model: ModelParams,
    pub train: TrainParams,
    pub adam: AdamConfig,
    pub eval: EvalParams,
    pub nav: NavParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let kbm = KbmParams::default();
        let expert = ExpertConfig::new(&kbm);
        let ds = DatasetConfig::default();
        let occ = Occupancy::default();
        Self {
            seed: 0,
            world: WorldConfig::default(),
            sensor: SensorConfig::default(),
            mppi_irl: PlannerParams::from_config(&MppiConfig::irl(&kbm)),
            mppi_mpc: PlannerParams::from_config(&MppiConfig::mpc(&kbm)),
            expert: ExpertParams {
                planner: PlannerParams::from_config(&expert.mppi),
                v_max: expert.mppi.vehicle.v_max,
                noise_var_v: expert.control_noise_var[0],
                noise_var_delta: expert.control_noise_var[1],
                reach_radius: expert.reach_radius,
                max_steps: expert.max_steps,
                lookahead: expert.lookahead,
            },
            dataset: DatasetParams {
                demos: ds.n_demos,
                window_stride: ds.window_stride,
                buffer_len: ds.buffer_len,
                skip: ds.mapping.skip,
                k_overhang: ds.mapping.k_overhang,
                map_length: ds.map_length,
                map_resolution: ds.map_resolution,
                test_fraction: ds.test_fraction,
                min_distance: ds.demo_distance.0,
                max_distance: ds.demo_distance.1,
            },
            model: ModelParams { kind: ModelKind::Linear, members: DEFAULT_ENSEMBLE_SIZE, c_max: 1.0 },
            train: TrainParams { epochs: 30, patience: 5, val_samples: 20, val_seeds: vec![0] },
            adam: AdamConfig::default(),
            eval: EvalParams {
                nu: 0.0,
                seeds: vec![0, 1, 2],
                occupancy_threshold: occ.threshold,
                inflation_radius: occ.inflation_radius,
            },
            nav: NavParams {
                waypoint_spacing: 50.0,
                waypoints: 10,
                buffer_len: 5,
                reach_radius: 4.0,
                max_steps: 20_000,
                teleport_distance: 5.0,
                teleport_clearance: 2.0,
                leg_budget_factor: 3.0,
                snapshots: true,
            },
            kbm,
        }
    }
}

/// Conversion between config fields and TOML values.
trait ConfValue: Sized {
    fn to_value(&self) -> Value;
    fn from_value(v: &Value) -> Option<Self>;
}

impl ConfValue for f64 {
    fn to_value(&self) -> Value {
        Value::Float(*self)
    }
    fn from_value(v: &Value) -> Option<Self> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }
}

impl ConfValue for usize {
    fn to_value(&self) -> Value {
        Value::Integer(*self as i64)
    }
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
}

impl ConfValue for u64 {
    fn to_value(&self) -> Value {
        Value::Integer(*self as i64)
    }
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
}

impl ConfValue for bool {
    fn to_value(&self) -> Value {
        Value::Boolean(*self)
    }
    fn from_value(v: &Value) -> Option<Self> {
        v.as_bool()
    }
}

impl ConfValue for ModelKind {
    fn to_value(&self) -> Value {
        Value::String(self.name().into())
    }
    fn from_value(v: &Value) -> Option<Self> {
        v.as_str().and_then(|s| s.parse().ok())
    }
}

impl ConfValue for Vec<u64> {
    fn to_value(&self) -> Value {
        Value::Array(self.iter().map(|s| s.to_value()).collect())
    }
    fn from_value(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(u64::from_value).collect()
    }
}

macro_rules! config_keys {
    ($($key:literal => [$($field:tt)+]),* $(,)?) => {
        impl RunConfig {
            /// Every configuration key, in print order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn get(&self, key: &str) -> Option<Value> {
                match key {
                    $($key => Some(self.$($field)+.to_value()),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, key: &str, value: &Value) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field)+ = ConfValue::from_value(value)
                            .ok_or_else(|| Error::config(format!("bad value for '{key}': {value}")))?;
                    })*
                    _ => return Err(Error::config(format!("unknown configuration key '{key}'"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "seed" => [seed],
    "world.extent" => [world.extent],
    "world.resolution" => [world.resolution],
    "world.trails" => [world.n_trails],
    "world.trail_width" => [world.trail_width],
    "world.tall_grass_patches" => [world.n_tall_grass],
    "world.bushes" => [world.n_bushes],
    "world.obstacles" => [world.n_obstacles],
    "world.hills" => [world.n_hills],
    "world.hill_height" => [world.hill_height],
    "world.hill_sigma" => [world.hill_sigma],
    "world.noise_amplitude" => [world.noise_amplitude],
    "world.noise_scale" => [world.noise_scale],
    "world.slope_threshold" => [world.slope_threshold],
    "world.cost.trail" => [world.costs.trail],
    "world.cost.low_grass" => [world.costs.low_grass],
    "world.cost.tall_grass" => [world.costs.tall_grass],
    "world.cost.bush" => [world.costs.bush],
    "world.cost.obstacle" => [world.costs.obstacle],
    "world.cost.slope" => [world.costs.slope],
    "sensor.max_range" => [sensor.max_range],
    "sensor.rays_azimuth" => [sensor.rays_azimuth],
    "sensor.rays_elevation" => [sensor.rays_elevation],
    "sensor.elevation_span" => [sensor.elevation_span],
    "sensor.noise_std" => [sensor.noise_std],
    "sensor.pose_rate" => [sensor.pose_rate],
    "sensor.mount_height" => [sensor.mount_height],
    "kbm.wheelbase" => [kbm.wheelbase],
    "kbm.k_v" => [kbm.k_v],
    "kbm.k_delta" => [kbm.k_delta],
    "kbm.v_min_irl" => [kbm.v_limits_irl.0],
    "kbm.v_max_irl" => [kbm.v_limits_irl.1],
    "kbm.v_min_mpc" => [kbm.v_limits_mpc.0],
    "kbm.v_max_mpc" => [kbm.v_limits_mpc.1],
    "kbm.delta_max" => [kbm.delta_max],
    "kbm.steer_rate_max" => [kbm.steer_rate_max],
    "kbm.dt_irl" => [kbm.dt_irl],
    "kbm.dt_mpc" => [kbm.dt_mpc],
    "mppi.irl.samples" => [mppi_irl.samples],
    "mppi.irl.horizon" => [mppi_irl.horizon],
    "mppi.irl.iterations" => [mppi_irl.iterations],
    "mppi.irl.goal_weight" => [mppi_irl.goal_weight],
    "mppi.irl.temperature" => [mppi_irl.temperature],
    "mppi.irl.noise_var_v" => [mppi_irl.noise_var_v],
    "mppi.irl.noise_var_delta" => [mppi_irl.noise_var_delta],
    "mppi.irl.alpha" => [mppi_irl.alpha],
    "mppi.irl.ou_rate" => [mppi_irl.ou_rate],
    "mppi.irl.ou_clamp" => [mppi_irl.ou_clamp],
    "mppi.mpc.samples" => [mppi_mpc.samples],
    "mppi.mpc.horizon" => [mppi_mpc.horizon],
    "mppi.mpc.iterations" => [mppi_mpc.iterations],
    "mppi.mpc.goal_weight" => [mppi_mpc.goal_weight],
    "mppi.mpc.temperature" => [mppi_mpc.temperature],
    "mppi.mpc.noise_var_v" => [mppi_mpc.noise_var_v],
    "mppi.mpc.noise_var_delta" => [mppi_mpc.noise_var_delta],
    "mppi.mpc.alpha" => [mppi_mpc.alpha],
    "mppi.mpc.ou_rate" => [mppi_mpc.ou_rate],
    "mppi.mpc.ou_clamp" => [mppi_mpc.ou_clamp],
    "expert.samples" => [expert.planner.samples],
    "expert.horizon" => [expert.planner.horizon],
    "expert.iterations" => [expert.planner.iterations],
    "expert.goal_weight" => [expert.planner.goal_weight],
    "expert.temperature" => [expert.planner.temperature],
    "expert.v_max" => [expert.v_max],
    "expert.noise_var_v" => [expert.noise_var_v],
    "expert.noise_var_delta" => [expert.noise_var_delta],
    "expert.reach_radius" => [expert.reach_radius],
    "expert.max_steps" => [expert.max_steps],
    "expert.lookahead" => [expert.lookahead],
    "dataset.demos" => [dataset.demos],
    "dataset.window_stride" => [dataset.window_stride],
    "dataset.buffer_len" => [dataset.buffer_len],
    "dataset.skip" => [dataset.skip],
    "dataset.k_overhang" => [dataset.k_overhang],
    "dataset.map_length" => [dataset.map_length],
    "dataset.map_resolution" => [dataset.map_resolution],
    "dataset.test_fraction" => [dataset.test_fraction],
    "dataset.min_distance" => [dataset.min_distance],
    "dataset.max_distance" => [dataset.max_distance],
    "model.kind" => [model.kind],
    "model.members" => [model.members],
    "model.c_max" => [model.c_max],
    "train.epochs" => [train.epochs],
    "train.patience" => [train.patience],
    "train.val_samples" => [train.val_samples],
    "train.val_seeds" => [train.val_seeds],
    "adam.lr" => [adam.lr],
    "adam.beta1" => [adam.beta1],
    "adam.beta2" => [adam.beta2],
    "adam.eps" => [adam.eps],
    "eval.nu" => [eval.nu],
    "eval.seeds" => [eval.seeds],
    "eval.occupancy_threshold" => [eval.occupancy_threshold],
    "eval.inflation_radius" => [eval.inflation_radius],
    "nav.waypoint_spacing" => [nav.waypoint_spacing],
    "nav.waypoints" => [nav.waypoints],
    "nav.buffer_len" => [nav.buffer_len],
    "nav.reach_radius" => [nav.reach_radius],
    "nav.max_steps" => [nav.max_steps],
    "nav.teleport_distance" => [nav.teleport_distance],
    "nav.teleport_clearance" => [nav.teleport_clearance],
    "nav.leg_budget_factor" => [nav.leg_budget_factor],
    "nav.snapshots" => [nav.snapshots],
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Apply every key of a TOML document on top of `self`.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::config(format!("configuration file: {e}")))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for (k, v) in entries {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read configuration {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_toml(&text)?;
        Ok(cfg)
    }

    /// Set one key from command-line text, parsed as a TOML value (bare
    /// words are taken as strings).
    pub fn set_str(&mut self, key: &str, text: &str) -> Result<()> {
        let value = format!("v = {text}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(text.to_string()));
        self.set(key, &value)
    }

    /// The fully resolved tree as `key = value` lines, itself loadable.
    pub fn render(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key resolves")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sensor.validate()?;
        self.kbm.validate()?;
        self.mppi_irl().validate()?;
        self.mppi_mpc().validate()?;
        self.expert().mppi.validate()?;
        self.training().validate()?;
        if !(-1.0..=1.0).contains(&self.eval.nu) {
            return Err(Error::config(format!("eval.nu must lie in [-1, 1], got {}", self.eval.nu)));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds must not be empty"));
        }
        if self.nav.waypoints < 2 || !(self.nav.waypoint_spacing > 0.0) {
            return Err(Error::config("navigation needs at least 2 waypoints with positive spacing"));
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) || self.dataset.min_distance > self.dataset.max_distance {
            return Err(Error::config("dataset test fraction must be in [0, 1) and min_distance <= max_distance"));
        }
        Ok(())
    }

    pub fn mppi_irl(&self) -> MppiConfig {
        self.mppi_irl.resolve(&self.kbm, Mode::Irl)
    }

    pub fn mppi_mpc(&self) -> MppiConfig {
        self.mppi_mpc.resolve(&self.kbm, Mode::Mpc)
    }

    pub fn expert(&self) -> ExpertConfig {
        let mut mppi = self.expert.planner.resolve(&self.kbm, Mode::Irl);
        mppi.vehicle = mppi.vehicle.with_speed_limits(self.kbm.v_limits_irl.0, self.expert.v_max);
        ExpertConfig {
            mppi,
            control_noise_var: [self.expert.noise_var_v, self.expert.noise_var_delta],
            reach_radius: self.expert.reach_radius,
            max_steps: self.expert.max_steps,
            lookahead: self.expert.lookahead,
        }
    }

    pub fn dataset(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            n_demos: d.demos,
            expert: self.expert(),
            window_stride: d.window_stride,
            buffer_len: d.buffer_len,
            mapping: MappingConfig { skip: d.skip, k_overhang: d.k_overhang },
            map_length: d.map_length,
            map_resolution: d.map_resolution,
            test_fraction: d.test_fraction,
            demo_distance: (d.min_distance, d.max_distance),
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            kind: self.model.kind,
            members: self.model.members,
            c_max: self.model.c_max,
            adam: self.adam,
            mppi: self.mppi_irl(),
            patience: self.train.patience,
            val_samples: self.train.val_samples,
            val_seeds: self.train.val_seeds.clone(),
        }
    }

    pub fn occupancy(&self) -> Occupancy {
        Occupancy { threshold: self.eval.occupancy_threshold, inflation_radius: self.eval.inflation_radius }
    }

    pub fn navigation(&self) -> NavConfig {
        let mut n = NavConfig::new(self.mppi_mpc());
        n.sensor = self.sensor.clone();
        n.buffer_len = self.nav.buffer_len;
        n.mapping = MappingConfig { skip: self.dataset.skip, k_overhang: self.dataset.k_overhang };
        n.map_length = self.dataset.map_length;
        n.map_resolution = self.dataset.map_resolution;
        n.reach_radius = self.nav.reach_radius;
        n.max_steps = self.nav.max_steps;
        n.teleport_distance = self.nav.teleport_distance;
        n.teleport_clearance = self.nav.teleport_clearance;
        n.leg_budget_factor = self.nav.leg_budget_factor;
        n.record_snapshots = self.nav.snapshots;
        n
    }
}

/// Check the defaults against the vehicle and planner tables. Returns one
/// message per mismatch.
pub fn check_paper_defaults() -> Vec<String> {
    let c = RunConfig::default();
    let expected: &[(&str, f64)] = &[
        ("kbm.wheelbase", 3.0),
        ("kbm.k_v", 1.0),
        ("kbm.k_delta", 10.0),
        ("kbm.v_min_irl", 2.0),
        ("kbm.v_max_irl", 15.0),
        ("kbm.v_min_mpc", 1.5),
        ("kbm.v_max_mpc", 3.5),
        ("kbm.delta_max", 0.52),
        ("kbm.steer_rate_max", 0.2),
        ("kbm.dt_irl", 0.1),
        ("kbm.dt_mpc", 0.15),
        ("mppi.irl.samples", 2048.0),
        ("mppi.irl.horizon", 75.0),
        ("mppi.irl.iterations", 10.0),
        ("mppi.irl.goal_weight", 20.0),
        ("mppi.irl.temperature", 20.0),
        ("mppi.irl.noise_var_v", 1.0),
        ("mppi.irl.noise_var_delta", 0.1),
        ("mppi.irl.alpha", 0.9),
        ("mppi.irl.ou_rate", 10.0),
        ("mppi.irl.ou_clamp", 5.0),
        ("mppi.mpc.samples", 512.0),
        ("mppi.mpc.horizon", 60.0),
        ("mppi.mpc.iterations", 1.0),
        ("mppi.mpc.goal_weight", 10.0),
        ("mppi.mpc.temperature", 20.0),
        ("mppi.mpc.noise_var_v", 1.0),
        ("mppi.mpc.noise_var_delta", 0.1),
        ("mppi.mpc.alpha", 0.9),
        ("mppi.mpc.ou_rate", 10.0),
        ("mppi.mpc.ou_clamp", 5.0),
        ("model.members", 16.0),
        ("dataset.map_length", 80.0),
        ("dataset.map_resolution", 0.5),
        ("sensor.max_range", 40.0),
        ("eval.nu", 0.0),
        ("eval.occupancy_threshold", 0.5),
        ("eval.inflation_radius", 1.5),
        ("nav.waypoint_spacing", 50.0),
        ("nav.reach_radius", 4.0),
    ];
    let mut problems = Vec::new();
    for &(key, want) in expected {
        match c.get(key).as_ref().and_then(f64::from_value) {
            Some(got) if got == want => {}
            got => problems.push(format!("{key}: expected {want}, found {got:?}")),
        }
    }
    if c.eval.seeds.len() != 3 {
        problems.push(format!("eval.seeds: expected 3 seeds, found {}", c.eval.seeds.len()));
    }
    problems
}
