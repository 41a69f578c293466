//! Open-loop trajectory matching, the occupancy baseline and closed-loop
//! waypoint navigation with simulated interventions.

use std::collections::VecDeque;

use log::{debug, warn};
use rayon::prelude::*;

use crate::costmap::Costmap;
use crate::costmodel::Ensemble;
use crate::dynamics::{step_unchecked, Control, State};
use crate::error::{Error, Result};
use crate::gridmap::{build_gridmap, Channel, GridMap, MapMeta, MappingConfig, PointCloud};
use crate::mppi::{shift_controls, solve, MppiConfig};
use crate::seed;
use crate::worldgen::{render_pointcloud, DemoSample, SensorConfig, World};

/// Modified Hausdorff distance: the larger of the two directed mean
/// nearest-neighbour distances.
pub fn mhd(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("modified Hausdorff distance needs two non-empty point sets"));
    }
    let directed = |from: &[[f64; 2]], to: &[[f64; 2]]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(directed(a, b).max(directed(b, a)))
}

pub const LETHAL_COST: f64 = 100.0;
pub const FREE_COST: f64 = 1.0;

/// Occupancy-style baseline: cells whose `diff` exceeds `threshold` are
/// lethal, dilated by `inflation_radius` (square neighborhood); everything
/// else costs one.
pub fn occupancy_baseline(map: &GridMap, threshold: f64, inflation_radius: f64) -> Costmap {
    let meta = map.meta;
    let (nx, ny) = (meta.nx, meta.ny);
    let r = (inflation_radius.max(0.0) / meta.resolution + 1e-9).floor() as usize;
    let lethal: Vec<bool> = (0..nx * ny)
        .map(|k| {
            let (i, j) = (k / ny, k % ny);
            !map.is_unknown(i, j) && f64::from(map.get(i, j, Channel::Diff)) > threshold
        })
        .collect();
    // Separable square dilation.
    let mut rows = vec![false; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            if lethal[i * ny + j] {
                for jj in j.saturating_sub(r)..=(j + r).min(ny - 1) {
                    rows[i * ny + jj] = true;
                }
            }
        }
    }
    let mut values = vec![FREE_COST; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            if rows[i * ny + j] {
                for ii in i.saturating_sub(r)..=(i + r).min(nx - 1) {
                    values[ii * ny + j] = LETHAL_COST;
                }
            }
        }
    }
    Costmap::new(meta, values).expect("baseline costs are finite")
}

/// Anything that turns a feature map into a costmap at a risk level.
pub trait CostProvider: Sync {
    fn name(&self) -> String;
    fn costmap(&self, map: &GridMap, nu: f64) -> Result<Costmap>;
}

impl CostProvider for Ensemble {
    fn name(&self) -> String {
        format!("{}x{}", self.kind(), self.len())
    }

    fn costmap(&self, map: &GridMap, nu: f64) -> Result<Costmap> {
        self.cvar(map, nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupancy {
    pub threshold: f64,
    pub inflation_radius: f64,
}

impl Default for Occupancy {
    fn default() -> Self {
        Self { threshold: 0.5, inflation_radius: 1.5 }
    }
}

impl CostProvider for Occupancy {
    fn name(&self) -> String {
        "occupancy".into()
    }

    fn costmap(&self, map: &GridMap, _nu: f64) -> Result<Costmap> {
        Ok(occupancy_baseline(map, self.threshold, self.inflation_radius))
    }
}

/// The world's true cost, resampled onto the map grid.
pub struct GroundTruth<'a>(pub &'a World);

impl CostProvider for GroundTruth<'_> {
    fn name(&self) -> String {
        "ground_truth".into()
    }

    fn costmap(&self, map: &GridMap, _nu: f64) -> Result<Costmap> {
        Ok(self.0.cost_map_on(&map.meta))
    }
}

pub struct ZeroCost;

impl CostProvider for ZeroCost {
    fn name(&self) -> String {
        "zero".into()
    }

    fn costmap(&self, map: &GridMap, _nu: f64) -> Result<Costmap> {
        Costmap::constant(map.meta, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMhd {
    pub seed: u64,
    pub sample: usize,
    pub mhd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhdResult {
    pub per_sample: Vec<SampleMhd>,
    /// Mean over samples, one entry per seed.
    pub seed_means: Vec<f64>,
    pub mean: f64,
    /// Standard deviation of the per-seed means (zero for a single seed).
    pub std: f64,
    /// (seed, sample) pairs on which the planner failed.
    pub failures: Vec<(u64, usize)>,
}

/// Plan from each sample's first expert state to its goal on the provider's
/// costmap and compare the planned positions to the expert's.
pub fn evaluate_mhd(
    provider: &dyn CostProvider,
    samples: &[&DemoSample],
    nu: f64,
    seeds: &[u64],
    cfg: &MppiConfig,
) -> Result<MhdResult> {
    if samples.is_empty() {
        return Err(Error::domain("MHD evaluation needs at least one sample"));
    }
    if seeds.is_empty() {
        return Err(Error::config("MHD evaluation needs at least one seed"));
    }
    let jobs: Vec<(u64, usize)> = seeds.iter().flat_map(|&s| (0..samples.len()).map(move |k| (s, k))).collect();
    let outcomes: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(s, k)| {
            let sample = samples[k];
            let costmap = provider.costmap(&sample.gridmap, nu)?;
            let mut rng = seed::rng(seed::derive_index(seed::derive(s, "eval-mhd"), k as u64));
            let sol = solve(&sample.start(), sample.goal, &costmap, cfg, None, &mut rng)?;
            let planned: Vec<[f64; 2]> = sol.nominal_states.iter().map(|s| s.position()).collect();
            mhd(&planned, &sample.expert.positions())
        })
        .collect();
    let mut per_sample = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for (&(s, k), out) in jobs.iter().zip(outcomes) {
        match out {
            Ok(v) => per_sample.push(SampleMhd { seed: s, sample: k, mhd: v }),
            Err(e @ (Error::Optimization(_) | Error::Domain(_))) => {
                warn!("planner failed on sample {k} (seed {s}): {e}");
                failures.push((s, k));
            }
            Err(e) => return Err(e),
        }
    }
    let seed_means: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let v: Vec<f64> = per_sample.iter().filter(|r| r.seed == s).map(|r| r.mhd).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    let mean = if per_sample.is_empty() {
        f64::NAN
    } else {
        per_sample.iter().map(|r| r.mhd).sum::<f64>() / per_sample.len() as f64
    };
    let std = if seed_means.len() < 2 {
        0.0
    } else {
        let m = seed_means.iter().sum::<f64>() / seed_means.len() as f64;
        (seed_means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (seed_means.len() - 1) as f64).sqrt()
    };
    Ok(MhdResult { per_sample, seed_means, mean, std, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionReason {
    Obstacle,
    WaypointMiss,
}

impl InterventionReason {
    pub fn name(self) -> &'static str {
        match self {
            InterventionReason::Obstacle => "obstacle",
            InterventionReason::WaypointMiss => "waypoint_miss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub position: [f64; 2],
    pub reason: InterventionReason,
    pub step: usize,
    /// The costmap the vehicle was planning on, when snapshots are enabled.
    pub costmap: Option<Costmap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavReport {
    pub autonomous_distance: f64,
    pub autonomous_time: f64,
    pub mean_speed: f64,
    pub interventions: usize,
    pub log: Vec<Intervention>,
    pub waypoints_reached: usize,
    /// False when the step budget ran out before the final waypoint.
    pub complete: bool,
    pub steps: usize,
    /// Driven positions, split wherever the vehicle was teleported.
    pub segments: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavConfig {
    pub mppi: MppiConfig,
    pub sensor: SensorConfig,
    pub buffer_len: usize,
    pub mapping: MappingConfig,
    pub map_length: f64,
    pub map_resolution: f64,
    pub reach_radius: f64,
    pub max_steps: usize,
    /// Distance past the failure point, along the waypoint line, at which a
    /// teleported vehicle resumes.
    pub teleport_distance: f64,
    /// Clearance from obstacles required at the resume point.
    pub teleport_clearance: f64,
    /// A leg is abandoned as missed after this many times the steps needed
    /// to drive it at minimum speed.
    pub leg_budget_factor: f64,
    pub record_snapshots: bool,
}

impl NavConfig {
    pub fn new(mppi: MppiConfig) -> Self {
        Self {
            mppi,
            sensor: SensorConfig::default(),
            buffer_len: 5,
            mapping: MappingConfig::default(),
            map_length: 80.0,
            map_resolution: 0.5,
            reach_radius: 4.0,
            max_steps: 20_000,
            teleport_distance: 5.0,
            teleport_clearance: 2.0,
            leg_budget_factor: 3.0,
            record_snapshots: false,
        }
    }
}

fn heading_to(from: [f64; 2], to: [f64; 2]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

fn clear_of_obstacles(world: &World, p: [f64; 2], radius: f64) -> bool {
    let steps = (radius / world.resolution).ceil() as i64;
    for di in -steps..=steps {
        for dj in -steps..=steps {
            let q = [p[0] + di as f64 * world.resolution, p[1] + dj as f64 * world.resolution];
            if (q[0] - p[0]).hypot(q[1] - p[1]) <= radius && world.is_obstacle(q[0], q[1]) {
                return false;
            }
        }
    }
    true
}

/// Drive a waypoint course in closed loop, re-mapping and re-planning every
/// step, and count the interventions a safety driver would make.
pub fn navigate(
    world: &World,
    waypoints: &[[f64; 2]],
    provider: &dyn CostProvider,
    nu: f64,
    cfg: &NavConfig,
    seed_value: u64,
) -> Result<NavReport> {
    if waypoints.len() < 2 {
        return Err(Error::domain("navigation needs at least two waypoints"));
    }
    if let Some(w) = waypoints.iter().find(|w| !world.contains(**w)) {
        return Err(Error::domain(format!("waypoint {w:?} lies outside the world")));
    }
    cfg.mppi.validate()?;
    let vehicle = cfg.mppi.vehicle;
    let dt = cfg.mppi.dt;
    let mut plan_rng = seed::rng_for(seed_value, "navigate-plan");
    let mut sense_rng = seed::rng_for(seed_value, "navigate-sense");

    let mut state = State::new(waypoints[0][0], waypoints[0][1], heading_to(waypoints[0], waypoints[1]), vehicle.v_min, 0.0);
    let mut target = 1;
    let mut buffer: VecDeque<PointCloud> = VecDeque::with_capacity(cfg.buffer_len.max(1));
    let mut warm: Option<Vec<Control>> = None;
    let mut report = NavReport {
        autonomous_distance: 0.0,
        autonomous_time: 0.0,
        mean_speed: 0.0,
        interventions: 0,
        log: Vec::new(),
        waypoints_reached: 0,
        complete: false,
        steps: 0,
        segments: vec![vec![state.position()]],
    };
    let mut closest = f64::INFINITY;
    let mut leg_steps = 0usize;

    while report.steps < cfg.max_steps {
        report.steps += 1;
        leg_steps += 1;
        let wp = waypoints[target];
        let prev = waypoints[target - 1];

        buffer.push_front(render_pointcloud(world, &state, &cfg.sensor, &mut sense_rng)?);
        buffer.truncate(cfg.buffer_len.max(1));
        let clouds: Vec<PointCloud> = buffer.iter().cloned().collect();
        let meta = MapMeta::centered(state.position(), [cfg.map_length, cfg.map_length], cfg.map_resolution)?;
        let map = build_gridmap(&clouds, cfg.mapping.skip, &meta, cfg.mapping.k_overhang)?;
        let costmap = provider.costmap(&map, nu)?;
        let sol = solve(&state, wp, &costmap, &cfg.mppi, warm.as_deref(), &mut plan_rng)?;
        let u = sol.nominal[0];
        let next = step_unchecked(&state, &u, dt, &vehicle);
        warm = Some(shift_controls(&sol.nominal));

        let leg_len = (wp[0] - prev[0]).hypot(wp[1] - prev[1]);
        let dir = [(wp[0] - prev[0]) / leg_len.max(1e-9), (wp[1] - prev[1]) / leg_len.max(1e-9)];
        let hit = world.is_obstacle(next.x, next.y);
        let outside = !world.contains(next.position());
        if !outside {
            report.autonomous_distance += (next.x - state.x).hypot(next.y - state.y);
            report.autonomous_time += dt;
            report.segments.last_mut().expect("segment list never empty").push(next.position());
            state = next;
        }

        let dist = (state.x - wp[0]).hypot(state.y - wp[1]);
        let past = (state.x - wp[0]) * dir[0] + (state.y - wp[1]) * dir[1] > 0.0;
        let over_budget = leg_steps as f64 > cfg.leg_budget_factor * leg_len / (vehicle.v_min.max(0.1) * dt);
        let reason = if hit {
            Some(InterventionReason::Obstacle)
        } else if dist <= cfg.reach_radius {
            None
        } else if outside || over_budget || (past && dist > closest) {
            Some(InterventionReason::WaypointMiss)
        } else {
            None
        };
        closest = closest.min(dist);

        let mut advance = dist <= cfg.reach_radius && reason.is_none();
        if let Some(reason) = reason {
            debug!("intervention ({}) at {:?}, step {}", reason.name(), state.position(), report.steps);
            report.log.push(Intervention {
                position: if hit { next.position() } else { state.position() },
                reason,
                step: report.steps,
                costmap: cfg.record_snapshots.then(|| costmap.clone()),
            });
            // Resume past the failure point on the line between waypoints.
            let along = ((state.x - prev[0]) * dir[0] + (state.y - prev[1]) * dir[1]).clamp(0.0, leg_len);
            let mut s = along + cfg.teleport_distance;
            let resume = loop {
                if reason == InterventionReason::WaypointMiss || s >= leg_len - cfg.reach_radius {
                    break None;
                }
                let p = [prev[0] + s * dir[0], prev[1] + s * dir[1]];
                if clear_of_obstacles(world, p, cfg.teleport_clearance) {
                    break Some(p);
                }
                s += world.resolution;
            };
            match resume {
                Some(p) => state = State::new(p[0], p[1], heading_to(prev, wp), vehicle.v_min, 0.0),
                None => {
                    state = State::new(wp[0], wp[1], state.theta, vehicle.v_min, 0.0);
                    advance = true;
                }
            }
            buffer.clear();
            warm = None;
            report.segments.push(vec![state.position()]);
        }
        if advance {
            report.waypoints_reached += 1;
            target += 1;
            closest = f64::INFINITY;
            leg_steps = 0;
            if target == waypoints.len() {
                report.complete = true;
                break;
            }
            if reason.is_some() {
                state.theta = heading_to(state.position(), waypoints[target]);
            }
        }
    }
    report.interventions = report.log.len();
    report.mean_speed = if report.autonomous_time > 0.0 {
        report.autonomous_distance / report.autonomous_time
    } else {
        0.0
    };
    if !report.complete {
        warn!("navigation step budget of {} exhausted at waypoint {target}", cfg.max_steps);
    }
    Ok(report)
}

/// A random waypoint course: `n` points `spacing` apart, turning at most
/// 60 degrees per leg, kept `margin` m inside the world and clear of
/// obstacles.
pub fn plan_course(world: &World, n: usize, spacing: f64, margin: f64, seed_value: u64) -> Result<Vec<[f64; 2]>> {
    use rand::Rng as _;
    if n < 2 || !(spacing > 0.0) {
        return Err(Error::config("a course needs at least 2 waypoints and positive spacing"));
    }
    let ok = |p: [f64; 2]| {
        p[0] >= margin && p[1] >= margin && p[0] <= world.extent - margin && p[1] <= world.extent - margin
            && clear_of_obstacles(world, p, 3.0)
    };
    let mut rng = seed::rng_for(seed_value, "course");
    for _ in 0..200 {
        let start = [rng.random_range(margin..world.extent - margin), rng.random_range(margin..world.extent - margin)];
        if !ok(start) {
            continue;
        }
        let mut pts = vec![start];
        let mut heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        while pts.len() < n {
            let last = *pts.last().expect("non-empty");
            let next = (0..40).find_map(|_| {
                let h = heading + rng.random_range(-1.047..1.047);
                let p = [last[0] + spacing * h.cos(), last[1] + spacing * h.sin()];
                ok(p).then_some((p, h))
            });
            match next {
                Some((p, h)) => {
                    pts.push(p);
                    heading = h;
                }
                None => break,
            }
        }
        if pts.len() == n {
            return Ok(pts);
        }
    }
    Err(Error::config(format!("could not fit a {n}-waypoint course with {spacing} m spacing in this world")))
}
