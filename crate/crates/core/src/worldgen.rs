//! Synthetic off-road worlds, a lidar-like renderer and an expert oracle.
//!
//! A world is a square heightfield with a semantic class per cell, a
//! vegetation (or obstacle) height above ground, and a ground-truth cost the
//! expert oracle plans on.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::costmap::Costmap;
use crate::dynamics::{step_unchecked, Control, KbmParams, Mode, State, Trajectory};
use crate::error::{Error, Result};
use crate::gridmap::{build_gridmap, GridMap, MapMeta, MappingConfig, PointCloud};
use crate::mppi::{sample_ou_noise, shift_controls, solve, MppiConfig};
use crate::seed::{self, Rng};

/// Expert windows are 7.5 s at 10 Hz.
pub const WINDOW_LEN: usize = 75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Semantic {
    Trail = 0,
    LowGrass = 1,
    TallGrass = 2,
    Bush = 3,
    Obstacle = 4,
    Slope = 5,
}

impl Semantic {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Semantic::Trail,
            1 => Semantic::LowGrass,
            2 => Semantic::TallGrass,
            3 => Semantic::Bush,
            4 => Semantic::Obstacle,
            5 => Semantic::Slope,
            _ => return None,
        })
    }

    /// Probability that a ray crossing this cell's canopy returns from it.
    fn canopy_hit_probability(self) -> f64 {
        match self {
            Semantic::LowGrass | Semantic::Slope => 0.35,
            Semantic::TallGrass => 0.6,
            Semantic::Bush => 0.85,
            Semantic::Trail | Semantic::Obstacle => 0.0,
        }
    }
}

/// Per-class ground-truth cost, plus a slope term proportional to the
/// heightfield gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub trail: f64,
    pub low_grass: f64,
    pub tall_grass: f64,
    pub bush: f64,
    pub obstacle: f64,
    pub slope: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { trail: 0.1, low_grass: 2.0, tall_grass: 8.0, bush: 20.0, obstacle: 100.0, slope: 20.0 }
    }
}

impl CostWeights {
    pub fn class_cost(&self, s: Semantic) -> f64 {
        match s {
            Semantic::Trail => self.trail,
            Semantic::LowGrass | Semantic::Slope => self.low_grass,
            Semantic::TallGrass => self.tall_grass,
            Semantic::Bush => self.bush,
            Semantic::Obstacle => self.obstacle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    /// Side length, m.
    pub extent: f64,
    /// m per cell.
    pub resolution: f64,
    pub n_trails: usize,
    pub trail_width: f64,
    pub n_tall_grass: usize,
    pub n_bushes: usize,
    pub n_obstacles: usize,
    pub n_hills: usize,
    pub hill_height: f64,
    pub hill_sigma: f64,
    /// Amplitude and lattice spacing of the rolling background terrain.
    pub noise_amplitude: f64,
    pub noise_scale: f64,
    /// Gradient magnitude above which grass is classed as slope.
    pub slope_threshold: f64,
    pub costs: CostWeights,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent: 300.0,
            resolution: 0.5,
            n_trails: 5,
            trail_width: 3.0,
            n_tall_grass: 14,
            n_bushes: 12,
            n_obstacles: 40,
            n_hills: 3,
            hill_height: 6.0,
            hill_sigma: 12.0,
            noise_amplitude: 2.0,
            noise_scale: 40.0,
            slope_threshold: 0.2,
            costs: CostWeights::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent >= 100.0) {
            return Err(Error::config(format!("world extent must be at least 100 m, got {}", self.extent)));
        }
        if !(self.resolution > 0.0 && self.resolution <= 1.0) {
            return Err(Error::config(format!("world resolution must be in (0, 1] m, got {}", self.resolution)));
        }
        if self.n_trails < 1 || self.n_tall_grass < 1 || self.n_obstacles < 5 || self.n_hills < 1 {
            return Err(Error::config(
                "worlds need at least 1 trail, 1 tall-grass patch, 5 obstacles and 1 hill",
            ));
        }
        if !(self.trail_width > 0.0 && self.hill_sigma > 0.0 && self.noise_scale > 0.0) {
            return Err(Error::config("trail width, hill sigma and noise scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub extent: f64,
    pub resolution: f64,
    pub seed: u64,
    /// Cells per side.
    pub n: usize,
    pub heightfield: Vec<f32>,
    pub semantic: Vec<Semantic>,
    /// Height of vegetation or obstacle above the ground, m.
    pub vegetation: Vec<f32>,
    pub ground_truth_cost: Vec<f32>,
}

impl World {
    /// A flat, bare world with the given uniform cost. Handy for tests and
    /// hand-built scenarios.
    pub fn flat(extent: f64, resolution: f64, cost: f32) -> Result<Self> {
        if !(extent > 0.0 && resolution > 0.0) {
            return Err(Error::config("flat world needs positive extent and resolution"));
        }
        let n = (extent / resolution + 1e-9).floor() as usize;
        Ok(Self {
            extent,
            resolution,
            seed: 0,
            n,
            heightfield: vec![0.0; n * n],
            semantic: vec![Semantic::Trail; n * n],
            vegetation: vec![0.0; n * n],
            ground_truth_cost: vec![cost; n * n],
        })
    }

    pub fn meta(&self) -> MapMeta {
        MapMeta::new([0.0, 0.0], [self.extent, self.extent], self.resolution).expect("world geometry is valid")
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x / self.resolution).floor();
        let fj = (y / self.resolution).floor();
        if fi >= 0.0 && fj >= 0.0 && fi < self.n as f64 && fj < self.n as f64 {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    pub fn contains(&self, pos: [f64; 2]) -> bool {
        self.cell_of(pos[0], pos[1]).is_some()
    }

    pub fn ground_height(&self, x: f64, y: f64) -> Option<f64> {
        self.cell_of(x, y).map(|(i, j)| f64::from(self.heightfield[self.idx(i, j)]))
    }

    pub fn semantic_at(&self, x: f64, y: f64) -> Option<Semantic> {
        self.cell_of(x, y).map(|(i, j)| self.semantic[self.idx(i, j)])
    }

    pub fn is_obstacle(&self, x: f64, y: f64) -> bool {
        self.semantic_at(x, y) == Some(Semantic::Obstacle)
    }

    /// Place a solid box obstacle covering the axis-aligned rectangle.
    pub fn add_box(&mut self, min: [f64; 2], max: [f64; 2], height: f32, cost: f32) {
        self.paint_rect(min, max, |w, k| {
            w.semantic[k] = Semantic::Obstacle;
            w.vegetation[k] = height;
            w.ground_truth_cost[k] = cost;
        });
    }

    /// Paint vegetation of the given class and height over a rectangle.
    pub fn add_vegetation(&mut self, min: [f64; 2], max: [f64; 2], class: Semantic, height: f32, cost: f32) {
        self.paint_rect(min, max, |w, k| {
            w.semantic[k] = class;
            w.vegetation[k] = height;
            w.ground_truth_cost[k] = cost;
        });
    }

    fn paint_rect(&mut self, min: [f64; 2], max: [f64; 2], mut f: impl FnMut(&mut World, usize)) {
        for i in 0..self.n {
            for j in 0..self.n {
                let c = [(i as f64 + 0.5) * self.resolution, (j as f64 + 0.5) * self.resolution];
                if c[0] >= min[0] && c[0] <= max[0] && c[1] >= min[1] && c[1] <= max[1] {
                    let k = self.idx(i, j);
                    f(self, k);
                }
            }
        }
    }

    /// Ground-truth cost as a planner costmap over the whole world.
    pub fn cost_map(&self) -> Costmap {
        let values = self.ground_truth_cost.iter().map(|&c| f64::from(c)).collect();
        Costmap::new(self.meta(), values).expect("world costs are finite")
    }

    /// Ground-truth cost resampled onto another grid (cell centers).
    pub fn cost_map_on(&self, meta: &MapMeta) -> Costmap {
        let mut values = vec![0.0; meta.n_cells()];
        let fallback = self.ground_truth_cost.iter().copied().fold(0.0f32, f32::max);
        for i in 0..meta.nx {
            for j in 0..meta.ny {
                let c = meta.cell_center(i, j);
                values[meta.flat(i, j)] = match self.cell_of(c[0], c[1]) {
                    Some((a, b)) => f64::from(self.ground_truth_cost[self.idx(a, b)]),
                    None => f64::from(fallback),
                };
            }
        }
        Costmap::new(*meta, values).expect("world costs are finite")
    }

    /// Positions of all trail cell centers.
    pub fn trail_cells(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.semantic[self.idx(i, j)] == Semantic::Trail {
                    out.push([(i as f64 + 0.5) * self.resolution, (j as f64 + 0.5) * self.resolution]);
                }
            }
        }
        out
    }

    fn gradient_magnitude(&self, i: usize, j: usize) -> f64 {
        let h = |a: isize, b: isize| {
            let a = a.clamp(0, self.n as isize - 1) as usize;
            let b = b.clamp(0, self.n as isize - 1) as usize;
            f64::from(self.heightfield[self.idx(a, b)])
        };
        let (i, j) = (i as isize, j as isize);
        let gx = (h(i + 1, j) - h(i - 1, j)) / (2.0 * self.resolution);
        let gy = (h(i, j + 1) - h(i, j - 1)) / (2.0 * self.resolution);
        gx.hypot(gy)
    }
}

/// Bilinear value noise with smoothstep interpolation on a random lattice.
struct ValueNoise {
    cells: usize,
    spacing: f64,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(extent: f64, spacing: f64, rng: &mut Rng) -> Self {
        let cells = (extent / spacing).ceil() as usize + 2;
        let values = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { cells, spacing, values }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.spacing, y / self.spacing);
        let (ix, iy) = (fx.floor().max(0.0) as usize, fy.floor().max(0.0) as usize);
        let (ix, iy) = (ix.min(self.cells - 2), iy.min(self.cells - 2));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s((fx - ix as f64).clamp(0.0, 1.0)), s((fy - iy as f64).clamp(0.0, 1.0)));
        let v = |a: usize, b: usize| self.values[a * self.cells + b];
        let top = v(ix, iy) * (1.0 - ty) + v(ix, iy + 1) * ty;
        let bottom = v(ix + 1, iy) * (1.0 - ty) + v(ix + 1, iy + 1) * ty;
        top * (1.0 - tx) + bottom * tx
    }
}

/// Random-walk trail with bounded curvature, sampled every `step` m.
fn trail_polyline(start: [f64; 2], heading: f64, extent: f64, rng: &mut Rng) -> Vec<[f64; 2]> {
    let step = 2.0;
    let margin = 2.0;
    let max_curvature = 1.0 / 18.0;
    let mut pts = vec![start];
    let (mut p, mut h, mut k) = (start, heading, 0.0f64);
    let normal = Normal::new(0.0, 0.012).expect("valid normal");
    for _ in 0..(3.0 * extent / step) as usize {
        k = (0.92 * k + normal.sample(rng)).clamp(-max_curvature, max_curvature);
        h += k * step;
        p = [p[0] + step * h.cos(), p[1] + step * h.sin()];
        if p[0] < margin || p[1] < margin || p[0] > extent - margin || p[1] > extent - margin {
            break;
        }
        pts.push(p);
    }
    pts
}

/// Generate a world. Deterministic in `(seed, cfg)`.
pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = seed::rng_for(seed, "world");
    let mut world = World::flat(cfg.extent, cfg.resolution, 0.0)?;
    world.seed = seed;
    let n = world.n;
    let res = cfg.resolution;
    let center = |i: usize| (i as f64 + 0.5) * res;

    // Rolling terrain plus a few steep hills.
    let coarse = ValueNoise::new(cfg.extent, cfg.noise_scale, &mut rng);
    let fine = ValueNoise::new(cfg.extent, cfg.noise_scale / 2.5, &mut rng);
    let hills: Vec<([f64; 2], f64)> = (0..cfg.n_hills)
        .map(|_| {
            let c = [rng.random_range(0.15..0.85) * cfg.extent, rng.random_range(0.15..0.85) * cfg.extent];
            let sign = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
            (c, sign * cfg.hill_height * rng.random_range(0.8..1.2))
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (center(i), center(j));
            let mut z = cfg.noise_amplitude * (coarse.at(x, y) + 0.25 * fine.at(x, y));
            for (c, amp) in &hills {
                let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                z += amp * (-d2 / (2.0 * cfg.hill_sigma * cfg.hill_sigma)).exp();
            }
            world.heightfield[i * n + j] = z as f32;
        }
    }

    // Low grass everywhere to start with.
    let grass_noise = ValueNoise::new(cfg.extent, 10.0, &mut rng);
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            world.semantic[k] = Semantic::LowGrass;
            world.vegetation[k] = (0.2 + 0.1 * grass_noise.at(center(i), center(j))) as f32;
        }
    }

    // Tall grass and bush blobs with wobbly outlines.
    let blob = |world: &mut World, rng: &mut Rng, class: Semantic, r_range: (f64, f64), h_range: (f64, f64)| {
        let c = [rng.random_range(0.05..0.95) * cfg.extent, rng.random_range(0.05..0.95) * cfg.extent];
        let r = rng.random_range(r_range.0..r_range.1);
        let phases = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let height = rng.random_range(h_range.0..h_range.1);
        let reach = ((r * 1.4) / res).ceil() as isize;
        let (ci, cj) = ((c[0] / res) as isize, (c[1] / res) as isize);
        for di in -reach..=reach {
            for dj in -reach..=reach {
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                    continue;
                }
                let (x, y) = (center(i as usize) - c[0], center(j as usize) - c[1]);
                let a = y.atan2(x);
                let edge = r * (1.0 + 0.2 * (2.0 * a + phases[0]).sin() + 0.1 * (3.0 * a + phases[1]).sin());
                if x.hypot(y) <= edge {
                    let k = i as usize * n + j as usize;
                    world.semantic[k] = class;
                    world.vegetation[k] = height as f32;
                }
            }
        }
    };
    for _ in 0..cfg.n_tall_grass {
        blob(&mut world, &mut rng, Semantic::TallGrass, (6.0, 15.0), (0.5, 1.0));
    }
    for _ in 0..cfg.n_bushes {
        blob(&mut world, &mut rng, Semantic::Bush, (1.0, 2.5), (1.0, 1.5));
    }

    // Connected trail network: every trail after the first branches off an
    // existing one.
    let mut trail_pts: Vec<[f64; 2]> = Vec::new();
    for t in 0..cfg.n_trails {
        let (start, heading) = if t == 0 {
            let s = [rng.random_range(0.1..0.3) * cfg.extent, rng.random_range(0.1..0.3) * cfg.extent];
            (s, PI / 4.0 + rng.random_range(-0.4..0.4))
        } else {
            let p = trail_pts[rng.random_range(0..trail_pts.len())];
            (p, rng.random_range(0.0..TAU))
        };
        let line = trail_polyline(start, heading, cfg.extent, &mut rng);
        trail_pts.extend(line.windows(2).flat_map(|w| {
            (0..4).map(move |s| {
                let f = s as f64 / 4.0;
                [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]
            })
        }));
        trail_pts.extend(line.last().copied());
    }
    let half_width = 0.5 * cfg.trail_width;
    let mut near_trail = vec![false; n * n];
    let stamp = ((half_width + 3.0) / res).ceil() as isize;
    for p in &trail_pts {
        let (ci, cj) = ((p[0] / res) as isize, (p[1] / res) as isize);
        for di in -stamp..=stamp {
            for dj in -stamp..=stamp {
                let (i, j) = (ci + di, cj + dj);
                if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                    continue;
                }
                let d = (center(i as usize) - p[0]).hypot(center(j as usize) - p[1]);
                let k = i as usize * n + j as usize;
                if d <= half_width {
                    world.semantic[k] = Semantic::Trail;
                    world.vegetation[k] = 0.0;
                }
                if d <= half_width + 3.0 {
                    near_trail[k] = true;
                }
            }
        }
    }

    // Box obstacles kept clear of trails.
    let mut placed = 0;
    let mut attempts = 0;
    while placed < cfg.n_obstacles && attempts < cfg.n_obstacles * 200 {
        attempts += 1;
        let c = [rng.random_range(0.03..0.97) * cfg.extent, rng.random_range(0.03..0.97) * cfg.extent];
        let half = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
        let height = rng.random_range(1.0..3.0);
        let (i0, i1) = (((c[0] - half[0]) / res).floor() as isize, ((c[0] + half[0]) / res).ceil() as isize);
        let (j0, j1) = (((c[1] - half[1]) / res).floor() as isize, ((c[1] + half[1]) / res).ceil() as isize);
        if i0 < 0 || j0 < 0 || i1 >= n as isize || j1 >= n as isize {
            continue;
        }
        let cells: Vec<usize> = (i0..i1)
            .flat_map(|i| (j0..j1).map(move |j| i as usize * n + j as usize))
            .collect();
        if cells.iter().any(|&k| near_trail[k]) {
            continue;
        }
        for k in cells {
            world.semantic[k] = Semantic::Obstacle;
            world.vegetation[k] = height as f32;
        }
        placed += 1;
    }
    if placed < 5 {
        return Err(Error::config("could not place 5 obstacles away from trails; enlarge the world"));
    }

    // Steep grass becomes slope; costs follow the class plus the gradient.
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let g = world.gradient_magnitude(i, j);
            if world.semantic[k] == Semantic::LowGrass && g > cfg.slope_threshold {
                world.semantic[k] = Semantic::Slope;
            }
            let cost = cfg.costs.class_cost(world.semantic[k]) + cfg.costs.slope * g;
            world.ground_truth_cost[k] = cost as f32;
        }
    }
    Ok(world)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub max_range: f64,
    pub rays_azimuth: usize,
    pub rays_elevation: usize,
    /// Steepest downward beam angle, rad. Beams are spread so that their flat
    /// ground intersections are evenly spaced out to `max_range`.
    pub elevation_span: f64,
    pub noise_std: f64,
    /// Clouds per second kept in the mapping buffer.
    pub pose_rate: f64,
    pub mount_height: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            max_range: 40.0,
            rays_azimuth: 360,
            rays_elevation: 64,
            elevation_span: 0.5,
            noise_std: 0.02,
            pose_rate: 10.0,
            mount_height: 2.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_range > 0.0
            && self.rays_azimuth >= 1
            && self.rays_elevation >= 1
            && self.elevation_span > 0.0
            && self.elevation_span < PI / 2.0
            && self.noise_std >= 0.0
            && self.pose_rate > 0.0
            && self.mount_height > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid sensor configuration: {self:?}")))
        }
    }

    /// Beam elevation angles, all at or below the horizon.
    pub fn elevations(&self) -> Vec<f64> {
        let near = self.mount_height / self.elevation_span.tan();
        let far = self.max_range.max(near);
        if self.rays_elevation == 1 {
            return vec![-(self.mount_height / (0.5 * (near + far))).atan()];
        }
        (0..self.rays_elevation)
            .map(|m| {
                let d = near + (far - near) * m as f64 / (self.rays_elevation - 1) as f64;
                -(self.mount_height / d).atan()
            })
            .collect()
    }
}

/// Cast the sensor's rays through the world from `pose`.
///
/// Obstacles and the ground are opaque; grass and bushes return a point from
/// inside the canopy with a class-dependent probability per crossed cell.
/// Each ray returns at most one point.
pub fn render_pointcloud(world: &World, pose: &State, sensor: &SensorConfig, rng: &mut Rng) -> Result<PointCloud> {
    sensor.validate()?;
    let ground = world
        .ground_height(pose.x, pose.y)
        .ok_or_else(|| Error::domain(format!("pose ({}, {}) is outside the world", pose.x, pose.y)))?;
    let origin = [pose.x, pose.y, ground + sensor.mount_height];
    let elevations = sensor.elevations();
    let noise = Normal::new(0.0, sensor.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut points = Vec::with_capacity(sensor.rays_azimuth * elevations.len() / 2);
    for a in 0..sensor.rays_azimuth {
        let az = pose.theta + TAU * a as f64 / sensor.rays_azimuth as f64;
        let dir = [az.cos(), az.sin()];
        for &el in &elevations {
            if let Some(mut p) = cast_ray(world, origin, dir, el, sensor.max_range * el.cos(), rng) {
                if sensor.noise_std > 0.0 {
                    p[2] += noise.sample(rng);
                }
                points.push(p);
            }
        }
    }
    Ok(PointCloud::new(points))
}

/// March one ray cell by cell (2-D DDA in the horizontal plane). `slope` is
/// the beam elevation; `s_max` the horizontal reach.
fn cast_ray(world: &World, origin: [f64; 3], dir: [f64; 2], elevation: f64, s_max: f64, rng: &mut Rng) -> Option<[f64; 3]> {
    let res = world.resolution;
    let tan_e = elevation.tan();
    let z_at = |s: f64| origin[2] + s * tan_e;
    let (mut i, mut j) = world.cell_of(origin[0], origin[1])?;
    let step_i: isize = if dir[0] >= 0.0 { 1 } else { -1 };
    let step_j: isize = if dir[1] >= 0.0 { 1 } else { -1 };
    let next_boundary = |idx: usize, step: isize| if step > 0 { (idx + 1) as f64 * res } else { idx as f64 * res };
    let inv = |d: f64| if d.abs() < 1e-12 { f64::INFINITY } else { 1.0 / d.abs() };
    let mut t_max_i = (next_boundary(i, step_i) - origin[0]).abs() * inv(dir[0]);
    let mut t_max_j = (next_boundary(j, step_j) - origin[1]).abs() * inv(dir[1]);
    let (t_delta_i, t_delta_j) = (res * inv(dir[0]), res * inv(dir[1]));
    let mut s_in = 0.0;
    loop {
        let s_out = t_max_i.min(t_max_j).min(s_max);
        let k = world.idx(i, j);
        let g = f64::from(world.heightfield[k]);
        let top = g + f64::from(world.vegetation[k]);
        let class = world.semantic[k];
        let point = |s: f64, z: f64| [origin[0] + s * dir[0], origin[1] + s * dir[1], z];
        let (z_in, z_out) = (z_at(s_in), z_at(s_out));
        if class == Semantic::Obstacle {
            if z_in <= top {
                return Some(point(s_in, z_in.max(g)));
            }
            if z_out <= top {
                let s = (top - origin[2]) / tan_e;
                return Some(point(s, top));
            }
        } else {
            let s_ground = if z_in <= g {
                Some(s_in)
            } else if z_out <= g {
                Some((g - origin[2]) / tan_e)
            } else {
                None
            };
            let p_hit = class.canopy_hit_probability();
            if p_hit > 0.0 && z_out < top {
                let s_canopy = if z_in <= top { s_in } else { (top - origin[2]) / tan_e };
                let s_end = s_ground.unwrap_or(s_out);
                if s_end > s_canopy && rng.random_bool(p_hit) {
                    let s = rng.random_range(s_canopy..s_end);
                    return Some(point(s, z_at(s).max(g)));
                }
            }
            if let Some(s) = s_ground {
                return Some(point(s, if z_in <= g { z_in.max(g - 1.0) } else { g }));
            }
        }
        if s_out >= s_max {
            return None;
        }
        s_in = s_out;
        if t_max_i < t_max_j {
            let ni = i as isize + step_i;
            if ni < 0 || ni >= world.n as isize {
                return None;
            }
            i = ni as usize;
            t_max_i += t_delta_i;
        } else {
            let nj = j as isize + step_j;
            if nj < 0 || nj >= world.n as isize {
                return None;
            }
            j = nj as usize;
            t_max_j += t_delta_j;
        }
    }
}

/// Settings for the expert oracle: a global cost-to-go for route guidance and
/// a receding-horizon MPPI tracker on the ground-truth cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    pub mppi: MppiConfig,
    /// Variance of the OU perturbation added to executed commands.
    pub control_noise_var: [f64; 2],
    pub reach_radius: f64,
    pub max_steps: usize,
    /// Distance along the global route to the intermediate MPPI goal.
    pub lookahead: f64,
}

impl ExpertConfig {
    pub fn new(params: &KbmParams) -> Self {
        let mut mppi = MppiConfig::irl(params);
        mppi.samples = 256;
        mppi.horizon = 40;
        mppi.iterations = 2;
        mppi.vehicle = params.vehicle(Mode::Irl).with_speed_limits(params.v_limits_irl.0, 4.5);
        Self { mppi, control_noise_var: [0.3, 0.01], reach_radius: 4.0, max_steps: 2000, lookahead: 15.0 }
    }
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self::new(&KbmParams::default())
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 8-connected Dijkstra cost-to-go toward `goal` over per-cell costs.
pub fn cost_to_go(costmap: &Costmap, goal: [f64; 2]) -> Result<Vec<f64>> {
    let meta = costmap.meta;
    let (gi, gj) = meta
        .cell_of(goal[0], goal[1])
        .ok_or_else(|| Error::domain(format!("goal {goal:?} outside the map")))?;
    let (nx, ny) = (meta.nx, meta.ny);
    let mut dist = vec![f64::INFINITY; nx * ny];
    let mut heap = BinaryHeap::new();
    dist[gi * ny + gj] = 0.0;
    heap.push(HeapItem(0.0, gi * ny + gj));
    let diag = std::f64::consts::SQRT_2;
    while let Some(HeapItem(d, k)) = heap.pop() {
        if d > dist[k] {
            continue;
        }
        let (i, j) = ((k / ny) as isize, (k % ny) as isize);
        for di in -1..=1isize {
            for dj in -1..=1isize {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                    continue;
                }
                let nk = a as usize * ny + b as usize;
                let len = if di != 0 && dj != 0 { diag } else { 1.0 };
                let edge = len * meta.resolution * 0.5 * (costmap.values()[k] + costmap.values()[nk]).max(0.0);
                let nd = d + edge + 1e-6;
                if nd < dist[nk] {
                    dist[nk] = nd;
                    heap.push(HeapItem(nd, nk));
                }
            }
        }
    }
    Ok(dist)
}

/// Follow the steepest descent of a cost-to-go field for `distance` meters.
fn lookahead_point(meta: &MapMeta, ctg: &[f64], from: [f64; 2], distance: f64) -> [f64; 2] {
    let Some((mut i, mut j)) = meta.cell_of(from[0], from[1]) else {
        return from;
    };
    let mut travelled = 0.0;
    while travelled < distance {
        let k = meta.flat(i, j);
        let mut best = (ctg[k], i, j);
        for di in -1..=1isize {
            for dj in -1..=1isize {
                let (a, b) = (i as isize + di, j as isize + dj);
                if a < 0 || b < 0 || a >= meta.nx as isize || b >= meta.ny as isize {
                    continue;
                }
                let v = ctg[meta.flat(a as usize, b as usize)];
                if v < best.0 {
                    best = (v, a as usize, b as usize);
                }
            }
        }
        if (best.1, best.2) == (i, j) {
            break;
        }
        travelled += if best.1 != i && best.2 != j { std::f64::consts::SQRT_2 } else { 1.0 } * meta.resolution;
        (i, j) = (best.1, best.2);
    }
    meta.cell_center(i, j)
}

/// Drive the oracle from `start` to within `reach_radius` of `goal` on the
/// ground-truth cost, recording states and executed commands at the oracle's
/// `dt`.
pub fn collect_expert_demo(
    world: &World,
    start: &State,
    goal: [f64; 2],
    cfg: &ExpertConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if !world.contains(start.position()) || !world.contains(goal) {
        return Err(Error::domain("expert start and goal must lie inside the world"));
    }
    let costmap = world.cost_map();
    let ctg = cost_to_go(&costmap, goal)?;
    let meta = costmap.meta;
    let dt = cfg.mppi.dt;
    let vehicle = cfg.mppi.vehicle;
    let mut traj = Trajectory::new(dt);
    let mut s = *start;
    let dist = |s: &State| (s.x - goal[0]).hypot(s.y - goal[1]);
    if dist(&s) <= 1e-9 {
        traj.push(s, vehicle.clamp_control(Control::new(s.v, s.delta)));
        return Ok(traj);
    }
    let noise_block = cfg.max_steps.max(1);
    let exec_noise = sample_ou_noise(1, noise_block, cfg.control_noise_var, cfg.mppi.ou_rate, cfg.mppi.ou_clamp, dt, rng);
    let mut warm: Option<Vec<Control>> = None;
    for step in 0..cfg.max_steps {
        let carrot = if dist(&s) <= cfg.lookahead {
            goal
        } else {
            lookahead_point(&meta, &ctg, s.position(), cfg.lookahead)
        };
        let sol = solve(&s, carrot, &costmap, &cfg.mppi, warm.as_deref(), rng)?;
        let e = exec_noise[step];
        let u = vehicle.clamp_control(Control::new(sol.nominal[0].v_target + e[0], sol.nominal[0].delta_target + e[1]));
        traj.push(s, u);
        if dist(&s) <= cfg.reach_radius {
            return Ok(traj);
        }
        s = step_unchecked(&s, &u, dt, &vehicle);
        if !world.contains(s.position()) {
            return Err(Error::Timeout { partial: traj.states });
        }
        warm = Some(shift_controls(&sol.nominal));
    }
    Err(Error::Timeout { partial: traj.states })
}

/// One training or test example: the map at window start and the expert's
/// next 7.5 s.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSample {
    pub demo_id: usize,
    pub window_start: usize,
    pub gridmap: GridMap,
    pub expert: Trajectory,
    pub goal: [f64; 2],
}

impl DemoSample {
    pub fn start(&self) -> State {
        self.expert.states[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_demos: usize,
    pub expert: ExpertConfig,
    /// Steps between consecutive window starts within a demo.
    pub window_stride: usize,
    /// Clouds in the mapping buffer at each window start.
    pub buffer_len: usize,
    pub mapping: MappingConfig,
    pub map_length: f64,
    pub map_resolution: f64,
    /// Fraction of demonstrations held out for testing.
    pub test_fraction: f64,
    /// Straight-line distance range between demo start and goal, m.
    pub demo_distance: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_demos: 10,
            expert: ExpertConfig::default(),
            window_stride: 25,
            buffer_len: 5,
            mapping: MappingConfig::default(),
            map_length: 80.0,
            map_resolution: 0.5,
            test_fraction: 0.25,
            demo_distance: (60.0, 140.0),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<DemoSample>,
    pub train_demos: Vec<usize>,
    pub test_demos: Vec<usize>,
    /// Demonstrations or windows dropped (too short, out of map, oracle failure).
    pub skipped: usize,
}

impl Dataset {
    pub fn train(&self) -> Vec<&DemoSample> {
        self.samples.iter().filter(|s| self.train_demos.contains(&s.demo_id)).collect()
    }

    pub fn test(&self) -> Vec<&DemoSample> {
        self.samples.iter().filter(|s| self.test_demos.contains(&s.demo_id)).collect()
    }
}

/// Render the mapping buffer for `states[t]`: the cloud at `t` and earlier
/// clouds at the sensor's pose rate.
pub fn render_buffer(
    world: &World,
    states: &[State],
    t: usize,
    dt: f64,
    sensor: &SensorConfig,
    buffer_len: usize,
    rng: &mut Rng,
) -> Result<Vec<PointCloud>> {
    let every = ((1.0 / (sensor.pose_rate * dt)).round() as usize).max(1);
    let mut clouds = Vec::with_capacity(buffer_len);
    for b in 0..buffer_len.max(1) {
        let Some(k) = t.checked_sub(b * every) else { break };
        clouds.push(render_pointcloud(world, &states[k], sensor, rng)?);
    }
    Ok(clouds)
}

/// Collect `cfg.n_demos` expert demonstrations and cut them into map/window
/// samples, split into train and test by demonstration.
pub fn build_dataset(world: &World, sensor: &SensorConfig, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_demos == 0 {
        return Err(Error::config("n_demos must be at least 1"));
    }
    sensor.validate()?;
    let trail = world.trail_cells();
    if trail.is_empty() {
        return Err(Error::config("world has no trail cells to start demonstrations from"));
    }
    let mut rng = seed::rng_for(seed, "demos");
    let mut plans = Vec::with_capacity(cfg.n_demos);
    while plans.len() < cfg.n_demos {
        let a = trail[rng.random_range(0..trail.len())];
        let b = trail[rng.random_range(0..trail.len())];
        let d = (a[0] - b[0]).hypot(a[1] - b[1]);
        if d >= cfg.demo_distance.0 && d <= cfg.demo_distance.1 {
            plans.push((a, b));
        }
    }
    let costmap = world.cost_map();
    let demos: Vec<Option<Trajectory>> = plans
        .par_iter()
        .enumerate()
        .map(|(d, &(a, b))| {
            let mut r = seed::rng(seed::derive_index(seed::derive(seed, "expert"), d as u64));
            let ctg = cost_to_go(&costmap, b).ok()?;
            let ahead = lookahead_point(&costmap.meta, &ctg, a, 6.0);
            let heading = (ahead[1] - a[1]).atan2(ahead[0] - a[0]);
            let start = State::new(a[0], a[1], heading, 3.0, 0.0);
            match collect_expert_demo(world, &start, b, &cfg.expert, &mut r) {
                Ok(t) => Some(t),
                Err(Error::Timeout { partial }) if partial.len() >= WINDOW_LEN => {
                    let mut t = Trajectory::new(cfg.expert.mppi.dt);
                    for s in partial {
                        t.push(s, Control::new(s.v, s.delta));
                    }
                    Some(t)
                }
                Err(e) => {
                    warn!("demonstration {d} failed: {e}");
                    None
                }
            }
        })
        .collect();

    let mut skipped = 0;
    let mut jobs = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        match demo {
            Some(t) if t.len() >= WINDOW_LEN => {
                let mut start = 0;
                while start + WINDOW_LEN <= t.len() {
                    jobs.push((d, start));
                    start += cfg.window_stride.max(1);
                }
            }
            _ => {
                warn!("demonstration {d} shorter than {WINDOW_LEN} steps, skipped");
                skipped += 1;
            }
        }
    }
    let samples: Vec<Result<Option<DemoSample>>> = jobs
        .par_iter()
        .map(|&(d, start)| {
            let demo = demos[d].as_ref().expect("job refers to a kept demo");
            let mut r = seed::rng(seed::derive_index(seed::derive(seed, "render"), ((d as u64) << 32) | start as u64));
            let clouds = render_buffer(world, &demo.states, start, demo.dt, sensor, cfg.buffer_len, &mut r)?;
            let center = demo.states[start].position();
            let meta = MapMeta::centered(center, [cfg.map_length, cfg.map_length], cfg.map_resolution)?;
            let expert = demo.window(start, WINDOW_LEN).expect("window within demo");
            if !expert.states.iter().all(|s| meta.contains(s.position())) {
                return Ok(None);
            }
            let gridmap = build_gridmap(&clouds, cfg.mapping.skip, &meta, cfg.mapping.k_overhang)?;
            let goal = expert.states[WINDOW_LEN - 1].position();
            Ok(Some(DemoSample { demo_id: d, window_start: start, gridmap, expert, goal }))
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match s? {
            Some(s) => out.push(s),
            None => skipped += 1,
        }
    }

    let mut ids: Vec<usize> = (0..cfg.n_demos).collect();
    for k in (1..ids.len()).rev() {
        ids.swap(k, rng.random_range(0..=k));
    }
    let n_test = if cfg.n_demos >= 2 {
        ((cfg.n_demos as f64 * cfg.test_fraction).ceil() as usize).clamp(1, cfg.n_demos - 1)
    } else {
        0
    };
    let mut test_demos = ids[..n_test].to_vec();
    let mut train_demos = ids[n_test..].to_vec();
    test_demos.sort_unstable();
    train_demos.sort_unstable();
    Ok(Dataset { samples: out, train_demos, test_demos, skipped })
}
