//! Bird's-eye-view terrain features from registered pointclouds.
//!
//! Cells are indexed `(i, j)` with `i` along world x and `j` along world y;
//! layers are stored row-major with `i` as the row, channel-last.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub const N_CHANNELS: usize = 12;

/// Feature channels in their frozen on-disk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(usize)]
pub enum Channel {
    HeightLow = 0,
    HeightMean = 1,
    HeightHigh = 2,
    HeightMax = 3,
    Terrain = 4,
    Slope = 5,
    Diff = 6,
    Svd1 = 7,
    Svd2 = 8,
    Svd3 = 9,
    Roughness = 10,
    Unknown = 11,
}

impl Channel {
    pub const ALL: [Channel; N_CHANNELS] = [
        Channel::HeightLow,
        Channel::HeightMean,
        Channel::HeightHigh,
        Channel::HeightMax,
        Channel::Terrain,
        Channel::Slope,
        Channel::Diff,
        Channel::Svd1,
        Channel::Svd2,
        Channel::Svd3,
        Channel::Roughness,
        Channel::Unknown,
    ];

    pub fn name(self) -> &'static str {
        CHANNEL_NAMES[self as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "height_low",
    "height_mean",
    "height_high",
    "height_max",
    "terrain",
    "slope",
    "diff",
    "svd1",
    "svd2",
    "svd3",
    "roughness",
    "unknown",
];

/// Verify that a recorded channel list matches the frozen ordering.
pub fn check_channel_names<S: AsRef<str>>(names: &[S]) -> Result<()> {
    let ok = names.len() == N_CHANNELS && names.iter().zip(CHANNEL_NAMES).all(|(a, b)| a.as_ref() == b);
    if ok {
        Ok(())
    } else {
        let got: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
        Err(Error::config(format!("channel order mismatch: expected {CHANNEL_NAMES:?}, got {got:?}")))
    }
}

/// Spatial extent and resolution of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMeta {
    pub origin: [f64; 2],
    pub length: [f64; 2],
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Result of looking up a world position in a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLookup {
    Inside(usize, usize),
    OutOfBounds,
}

impl MapMeta {
    pub fn new(origin: [f64; 2], length: [f64; 2], resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !(length[0] > 0.0) || !(length[1] > 0.0) {
            return Err(Error::config(format!("invalid map geometry: length {length:?}, resolution {resolution}")));
        }
        if !origin[0].is_finite() || !origin[1].is_finite() {
            return Err(Error::config("map origin must be finite"));
        }
        let nx = (length[0] / resolution + 1e-9).floor() as usize;
        let ny = (length[1] / resolution + 1e-9).floor() as usize;
        if nx == 0 || ny == 0 {
            return Err(Error::config("map has no cells"));
        }
        Ok(Self { origin, length, resolution, nx, ny })
    }

    /// The standard 80 m x 80 m, 0.5 m robot-centric map anchored at `origin`.
    pub fn standard(origin: [f64; 2]) -> Self {
        Self::new(origin, [80.0, 80.0], 0.5).expect("standard geometry is valid")
    }

    /// A map of the given size whose origin is snapped to the resolution
    /// lattice so that `center` lies within one cell of the map center.
    pub fn centered(center: [f64; 2], length: [f64; 2], resolution: f64) -> Result<Self> {
        let snap = |c: f64, l: f64| ((c - 0.5 * l) / resolution).round() * resolution;
        Self::new([snap(center[0], length[0]), snap(center[1], length[1])], length, resolution)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn center(&self) -> [f64; 2] {
        [
            self.origin[0] + 0.5 * self.nx as f64 * self.resolution,
            self.origin[1] + 0.5 * self.ny as f64 * self.resolution,
        ]
    }

    /// Floor a world position to a cell.
    pub fn world_to_cell(&self, pos: [f64; 2]) -> Result<CellLookup> {
        if !pos[0].is_finite() || !pos[1].is_finite() {
            return Err(Error::domain(format!("non-finite position {pos:?}")));
        }
        Ok(match self.cell_of(pos[0], pos[1]) {
            Some((i, j)) => CellLookup::Inside(i, j),
            None => CellLookup::OutOfBounds,
        })
    }

    /// Fast lookup for hot loops; non-finite input maps to `None`.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin[0]) / self.resolution).floor();
        let fj = ((y - self.origin[1]) / self.resolution).floor();
        if fi >= 0.0 && fj >= 0.0 && fi < self.nx as f64 && fj < self.ny as f64 {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    #[inline]
    pub fn flat_index_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(i, j)| i * self.ny + j)
    }

    #[inline]
    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.resolution,
            self.origin[1] + (j as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn contains(&self, pos: [f64; 2]) -> bool {
        self.cell_of(pos[0], pos[1]).is_some()
    }
}

pub fn world_to_cell(pos: [f64; 2], meta: &MapMeta) -> Result<CellLookup> {
    meta.world_to_cell(pos)
}

/// A registered pointcloud in the world frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// The 12-channel feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub meta: MapMeta,
    data: Vec<f32>,
}

impl GridMap {
    /// An all-unknown map.
    pub fn unknown(meta: MapMeta) -> Self {
        let mut data = vec![0.0; meta.n_cells() * N_CHANNELS];
        for cell in data.chunks_exact_mut(N_CHANNELS) {
            cell[Channel::Unknown.index()] = 1.0;
        }
        Self { meta, data }
    }

    pub fn from_data(meta: MapMeta, data: Vec<f32>) -> Result<Self> {
        if data.len() != meta.n_cells() * N_CHANNELS {
            return Err(Error::data(format!(
                "gridmap payload has {} values, expected {}",
                data.len(),
                meta.n_cells() * N_CHANNELS
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("gridmap payload contains non-finite values"));
        }
        Ok(Self { meta, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, channel: Channel) -> f32 {
        self.data[(i * self.meta.ny + j) * N_CHANNELS + channel as usize]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, channel: Channel, value: f32) {
        self.data[(i * self.meta.ny + j) * N_CHANNELS + channel as usize] = value;
    }

    /// Feature vector of a cell.
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let k = (i * self.meta.ny + j) * N_CHANNELS;
        &self.data[k..k + N_CHANNELS]
    }

    /// Copy out one channel as a dense layer.
    pub fn layer(&self, channel: Channel) -> Vec<f32> {
        self.data.chunks_exact(N_CHANNELS).map(|c| c[channel as usize]).collect()
    }

    pub fn is_unknown(&self, i: usize, j: usize) -> bool {
        self.get(i, j, Channel::Unknown) > 0.5
    }
}

/// Outcome of the terrain fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerrainStatus {
    Ok,
    /// No known cells; the layer is all zeros.
    NoData,
}

/// Normalized 5x5 Gaussian with sigma of one cell.
fn gaussian_kernel() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut total = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 2.0, b as f64 - 2.0);
            *v = (-(da * da + db * db) / 2.0).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Fill unknown cells by repeated nearest-known-neighbor dilation, then
/// low-pass filter with a 5x5 Gaussian (replicate padding).
pub fn terrain_estimate(layer: &[f64], known: &[bool], nx: usize, ny: usize) -> Result<(Vec<f64>, TerrainStatus)> {
    if layer.len() != nx * ny || known.len() != nx * ny {
        return Err(Error::domain(format!(
            "terrain layer size {} / mask {} does not match {nx}x{ny}",
            layer.len(),
            known.len()
        )));
    }
    if !known.iter().any(|&k| k) {
        return Ok((vec![0.0; nx * ny], TerrainStatus::NoData));
    }
    let mut filled = layer.to_vec();
    let mut is_known = known.to_vec();
    let mut frontier: Vec<usize> = Vec::new();
    for idx in 0..nx * ny {
        if !is_known[idx] && has_known_neighbor(&is_known, idx, nx, ny) {
            frontier.push(idx);
        }
    }
    while !frontier.is_empty() {
        let updates: Vec<(usize, f64)> = frontier
            .iter()
            .map(|&idx| {
                let (i, j) = ((idx / ny) as isize, (idx % ny) as isize);
                let (mut sum, mut count) = (0.0, 0usize);
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                            continue;
                        }
                        let n = a as usize * ny + b as usize;
                        if is_known[n] {
                            sum += filled[n];
                            count += 1;
                        }
                    }
                }
                (idx, sum / count as f64)
            })
            .collect();
        for &(idx, v) in &updates {
            filled[idx] = v;
            is_known[idx] = true;
        }
        let mut next = Vec::new();
        for &(idx, _) in &updates {
            let (i, j) = ((idx / ny) as isize, (idx % ny) as isize);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (a, b) = (i + di, j + dj);
                    if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                        continue;
                    }
                    let n = a as usize * ny + b as usize;
                    if !is_known[n] {
                        is_known[n] = true;
                        next.push(n);
                    }
                }
            }
        }
        // Cells queued for the next wave were marked only to dedupe.
        for &n in &next {
            is_known[n] = false;
        }
        next.sort_unstable();
        frontier = next;
    }

    let kernel = gaussian_kernel();
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx {
        for j in 0..ny {
            let mut acc = 0.0;
            for (a, row) in kernel.iter().enumerate() {
                let ii = clamp_idx(i as isize + a as isize - 2, nx);
                for (b, w) in row.iter().enumerate() {
                    let jj = clamp_idx(j as isize + b as isize - 2, ny);
                    acc += w * filled[ii * ny + jj];
                }
            }
            out[i * ny + j] = acc;
        }
    }
    Ok((out, TerrainStatus::Ok))
}

fn has_known_neighbor(known: &[bool], idx: usize, nx: usize, ny: usize) -> bool {
    let (i, j) = ((idx / ny) as isize, (idx % ny) as isize);
    for di in -1..=1 {
        for dj in -1..=1 {
            let (a, b) = (i + di, j + dj);
            if (di, dj) != (0, 0) && a >= 0 && b >= 0 && a < nx as isize && b < ny as isize && known[a as usize * ny + b as usize] {
                return true;
            }
        }
    }
    false
}

/// Slope layer `0.5 (|dT/dx| + |dT/dy|)` from 3x3 Sobel filters scaled to m/m.
pub fn slope_layer(terrain: &[f64], nx: usize, ny: usize, resolution: f64) -> Vec<f64> {
    let scale = 1.0 / (8.0 * resolution);
    let t = |i: isize, j: isize| terrain[clamp_idx(i, nx) * ny + clamp_idx(j, ny)];
    let mut out = vec![0.0; nx * ny];
    for i in 0..nx as isize {
        for j in 0..ny as isize {
            let gx = (t(i + 1, j - 1) + 2.0 * t(i + 1, j) + t(i + 1, j + 1))
                - (t(i - 1, j - 1) + 2.0 * t(i - 1, j) + t(i - 1, j + 1));
            let gy = (t(i - 1, j + 1) + 2.0 * t(i, j + 1) + t(i + 1, j + 1))
                - (t(i - 1, j - 1) + 2.0 * t(i, j - 1) + t(i + 1, j - 1));
            out[i as usize * ny + j as usize] = 0.5 * (gx.abs() + gy.abs()) * scale;
        }
    }
    out
}

/// Shape features `(svd1, svd2, svd3, roughness)` of a cell's points from the
/// singular values of the mean-centered point matrix.
pub fn cell_svd_features(points: &[[f64; 3]]) -> [f64; 4] {
    if points.len() < 3 {
        return [0.0; 4];
    }
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::new(p[0], p[1], p[2]);
    }
    mean /= n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = Vector3::new(p[0], p[1], p[2]) - mean;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let (l1, l2, l3) = (sv[0], sv[1], sv[2]);
    if !(l1 > 0.0) {
        return [0.0; 4];
    }
    [
        ((l1 - l2) / l1).clamp(0.0, 1.0),
        ((l2 - l3) / l1).clamp(0.0, 1.0),
        (l3 / l1).clamp(0.0, 1.0),
        (l3 / (l1 + l2 + l3)).clamp(0.0, 1.0 / 3.0),
    ]
}

/// Feature extraction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    /// Use every `skip`-th cloud of the buffer.
    pub skip: usize,
    /// Points at or above `terrain + k_overhang` are treated as overhangs.
    pub k_overhang: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self { skip: 1, k_overhang: 2.0 }
    }
}

/// Build the feature tensor from a buffer of registered pointclouds.
pub fn build_gridmap(buffer: &[PointCloud], skip: usize, meta: &MapMeta, k_overhang: f64) -> Result<GridMap> {
    if buffer.is_empty() {
        return Err(Error::domain("pointcloud buffer is empty"));
    }
    if skip == 0 {
        return Err(Error::domain("pointcloud skip must be at least 1"));
    }
    let (nx, ny) = (meta.nx, meta.ny);
    let n_cells = nx * ny;

    // Bin every kept point to its column.
    let mut cell_of_point: Vec<(usize, [f64; 3])> = Vec::new();
    for cloud in buffer.iter().step_by(skip) {
        for p in &cloud.points {
            if let Some(idx) = meta.flat_index_of(p[0], p[1]) {
                if p[2].is_finite() {
                    cell_of_point.push((idx, *p));
                }
            }
        }
    }
    if cell_of_point.is_empty() {
        return Ok(GridMap::unknown(*meta));
    }
    let mut starts = vec![0usize; n_cells + 1];
    for (idx, _) in &cell_of_point {
        starts[idx + 1] += 1;
    }
    for k in 0..n_cells {
        starts[k + 1] += starts[k];
    }
    let mut cursor = starts.clone();
    let mut binned = vec![[0.0; 3]; cell_of_point.len()];
    for (idx, p) in cell_of_point {
        binned[cursor[idx]] = p;
        cursor[idx] += 1;
    }
    // Canonical order inside each cell makes features independent of input order.
    for k in 0..n_cells {
        binned[starts[k]..starts[k + 1]].sort_by(|a, b| {
            a[2].total_cmp(&b[2]).then(a[0].total_cmp(&b[0])).then(a[1].total_cmp(&b[1]))
        });
    }

    let mut low = vec![0.0; n_cells];
    let mut max = vec![0.0; n_cells];
    let mut known = vec![false; n_cells];
    for k in 0..n_cells {
        let pts = &binned[starts[k]..starts[k + 1]];
        if let (Some(first), Some(last)) = (pts.first(), pts.last()) {
            low[k] = first[2];
            max[k] = last[2];
            known[k] = true;
        }
    }
    let (terrain, _) = terrain_estimate(&low, &known, nx, ny)?;
    let slope = slope_layer(&terrain, nx, ny, meta.resolution);

    let mut map = GridMap::unknown(*meta);
    let mut kept: Vec<[f64; 3]> = Vec::new();
    for k in 0..n_cells {
        let pts = &binned[starts[k]..starts[k + 1]];
        kept.clear();
        kept.extend(pts.iter().filter(|p| p[2] < terrain[k] + k_overhang));
        if kept.is_empty() {
            continue;
        }
        let high = kept.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
        let lowest_kept = kept.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let mean = (kept.iter().map(|p| p[2]).sum::<f64>() / kept.len() as f64).clamp(lowest_kept, high);
        let svd = cell_svd_features(&kept);
        let cell = &mut map.data[k * N_CHANNELS..(k + 1) * N_CHANNELS];
        cell[Channel::HeightLow as usize] = low[k] as f32;
        cell[Channel::HeightMean as usize] = mean as f32;
        cell[Channel::HeightHigh as usize] = high as f32;
        cell[Channel::HeightMax as usize] = max[k] as f32;
        cell[Channel::Terrain as usize] = terrain[k] as f32;
        cell[Channel::Slope as usize] = slope[k] as f32;
        cell[Channel::Diff as usize] = (high - terrain[k]) as f32;
        cell[Channel::Svd1 as usize] = svd[0] as f32;
        cell[Channel::Svd2 as usize] = svd[1] as f32;
        cell[Channel::Svd3 as usize] = svd[2] as f32;
        cell[Channel::Roughness as usize] = svd[3] as f32;
        cell[Channel::Unknown as usize] = 0.0;
    }
    Ok(map)
}
