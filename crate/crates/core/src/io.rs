//! On-disk formats.
//!
//! Binary containers share one layout: an 8-byte magic, a little-endian u32
//! header length, a UTF-8 `key=value` header, then a little-endian f32
//! payload. Readers check the payload length exactly, so truncated or padded
//! files are rejected before anything is built.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::costmap::Costmap;
use crate::costmodel::{CostModel, Ensemble, ModelKind, Normalization};
use crate::dynamics::{Control, State, Trajectory};
use crate::error::{Error, Result};
use crate::gridmap::{check_channel_names, GridMap, MapMeta, CHANNEL_NAMES, N_CHANNELS};
use crate::worldgen::{Dataset, DemoSample, Semantic, World};

pub const WORLD_MAGIC: &[u8; 8] = b"WORLD001";
pub const GRIDMAP_MAGIC: &[u8; 8] = b"GRIDMAP1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDIRL01";
pub const TRAJ_HEADER: &str = "t,x,y,theta,v,delta,v_cmd,delta_cmd";
pub const WORLD_CHANNELS: [&str; 4] = ["height", "semantic", "vegetation_height", "ground_truth_cost"];

fn container(magic: &[u8; 8], header: &str, payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out
}

fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Split a container into its header map and payload.
fn open_container<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<(BTreeMap<String, String>, &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::data(format!("{what}: bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
    let header = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::data(format!("{what}: truncated header")))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::data(format!("{what}: header is not UTF-8")))?;
    Ok((parse_kv(header, what)?, &bytes[12 + hlen..]))
}

fn parse_kv(text: &str, what: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("{what}: malformed header line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn field<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str, what: &str) -> Result<T> {
    h.get(key)
        .ok_or_else(|| Error::data(format!("{what}: missing header key '{key}'")))?
        .parse()
        .map_err(|_| Error::data(format!("{what}: bad value for '{key}'")))
}

fn floats(h: &BTreeMap<String, String>, key: &str, what: &str) -> Result<Vec<f64>> {
    h.get(key)
        .ok_or_else(|| Error::data(format!("{what}: missing header key '{key}'")))?
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::data(format!("{what}: bad number in '{key}'"))))
        .collect()
}

fn read_f32s(payload: &[u8], expected: usize, what: &str) -> Result<Vec<f32>> {
    if payload.len() != expected * 4 {
        return Err(Error::data(format!("{what}: payload has {} bytes, expected {}", payload.len(), expected * 4)));
    }
    let out: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(format!("{what}: non-finite value in payload")));
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))
}

pub fn world_to_bytes(w: &World) -> Vec<u8> {
    let header = format!(
        "extent={}\nresolution={}\nseed={}\ncells={}\nchannels={}\n",
        w.extent,
        w.resolution,
        w.seed,
        w.n,
        WORLD_CHANNELS.join(",")
    );
    let mut out = container(WORLD_MAGIC, &header, 16 * w.n * w.n);
    push_f32s(&mut out, w.heightfield.iter().copied());
    push_f32s(&mut out, w.semantic.iter().map(|&s| f32::from(s as u8)));
    push_f32s(&mut out, w.vegetation.iter().copied());
    push_f32s(&mut out, w.ground_truth_cost.iter().copied());
    out
}

pub fn world_from_bytes(bytes: &[u8]) -> Result<World> {
    const WHAT: &str = "world file";
    let (h, payload) = open_container(bytes, WORLD_MAGIC, WHAT)?;
    let extent: f64 = field(&h, "extent", WHAT)?;
    let resolution: f64 = field(&h, "resolution", WHAT)?;
    let seed: u64 = field(&h, "seed", WHAT)?;
    let n: usize = field(&h, "cells", WHAT)?;
    let channels: String = field(&h, "channels", WHAT)?;
    if channels != WORLD_CHANNELS.join(",") {
        return Err(Error::data(format!("{WHAT}: unexpected channels '{channels}'")));
    }
    if !(extent > 0.0 && resolution > 0.0) || n != (extent / resolution + 1e-9).floor() as usize {
        return Err(Error::data(format!("{WHAT}: inconsistent geometry")));
    }
    let nn = n.checked_mul(n).ok_or_else(|| Error::data(format!("{WHAT}: absurd size")))?;
    let all = read_f32s(payload, 4 * nn, WHAT)?;
    let semantic = all[nn..2 * nn]
        .iter()
        .map(|&c| {
            if c.fract() == 0.0 && (0.0..=255.0).contains(&c) {
                Semantic::from_code(c as u8)
            } else {
                None
            }
            .ok_or_else(|| Error::data(format!("{WHAT}: invalid semantic code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth_cost = all[3 * nn..].to_vec();
    if ground_truth_cost.iter().any(|&c| c < 0.0) {
        return Err(Error::data(format!("{WHAT}: negative ground-truth cost")));
    }
    Ok(World {
        extent,
        resolution,
        seed,
        n,
        heightfield: all[..nn].to_vec(),
        semantic,
        vegetation: all[2 * nn..3 * nn].to_vec(),
        ground_truth_cost,
    })
}

pub fn write_world(path: &Path, w: &World) -> Result<()> {
    Ok(fs::write(path, world_to_bytes(w))?)
}

pub fn read_world(path: &Path) -> Result<World> {
    world_from_bytes(&read_file(path)?)
}

/// `width` counts cells along x (the row index `i`), `height` along y.
pub fn gridmap_to_bytes(m: &GridMap) -> Vec<u8> {
    let meta = m.meta;
    let header = format!(
        "width={}\nheight={}\nchannels={}\nresolution={}\norigin_x={}\norigin_y={}\nchannel_names={}\n",
        meta.nx,
        meta.ny,
        N_CHANNELS,
        meta.resolution,
        meta.origin[0],
        meta.origin[1],
        CHANNEL_NAMES.join(",")
    );
    let mut out = container(GRIDMAP_MAGIC, &header, 4 * m.data().len());
    push_f32s(&mut out, m.data().iter().copied());
    out
}

pub fn gridmap_from_bytes(bytes: &[u8]) -> Result<GridMap> {
    const WHAT: &str = "gridmap";
    let (h, payload) = open_container(bytes, GRIDMAP_MAGIC, WHAT)?;
    let nx: usize = field(&h, "width", WHAT)?;
    let ny: usize = field(&h, "height", WHAT)?;
    let channels: usize = field(&h, "channels", WHAT)?;
    let resolution: f64 = field(&h, "resolution", WHAT)?;
    let origin = [field(&h, "origin_x", WHAT)?, field(&h, "origin_y", WHAT)?];
    let names: String = field(&h, "channel_names", WHAT)?;
    let names: Vec<&str> = names.split(',').collect();
    if channels != N_CHANNELS || names.len() != channels {
        return Err(Error::data(format!("{WHAT}: expected {N_CHANNELS} channels, header says {channels}")));
    }
    check_channel_names(&names).map_err(|e| Error::data(e.to_string()))?;
    let meta = MapMeta::new(origin, [nx as f64 * resolution, ny as f64 * resolution], resolution)
        .map_err(|e| Error::data(e.to_string()))?;
    if meta.nx != nx || meta.ny != ny {
        return Err(Error::data(format!("{WHAT}: inconsistent geometry")));
    }
    let data = read_f32s(payload, nx * ny * N_CHANNELS, WHAT)?;
    GridMap::from_data(meta, data).map_err(|e| Error::data(e.to_string()))
}

pub fn write_gridmap(path: &Path, m: &GridMap) -> Result<()> {
    Ok(fs::write(path, gridmap_to_bytes(m))?)
}

pub fn read_gridmap(path: &Path) -> Result<GridMap> {
    gridmap_from_bytes(&read_file(path)?)
}

pub fn trajectory_to_csv(t: &Trajectory) -> String {
    let mut out = String::from(TRAJ_HEADER);
    out.push('\n');
    for (k, (s, u)) in t.states.iter().zip(&t.controls).enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            k as f64 * t.dt,
            s.x,
            s.y,
            s.theta,
            s.v,
            s.delta,
            u.v_target,
            u.delta_target
        );
    }
    out
}

/// Parse a trajectory; `dt` is taken from the second row's time stamp
/// (`default_dt` for single-row files).
pub fn trajectory_from_csv(text: &str, default_dt: f64) -> Result<Trajectory> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRAJ_HEADER) {
        return Err(Error::data(format!("trajectory: header must be '{TRAJ_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::data(format!("trajectory: bad number on row {}", k + 1)))?;
        if v.len() != 8 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::data(format!("trajectory: row {} needs 8 finite values", k + 1)));
        }
        rows.push(v);
    }
    if rows.is_empty() {
        return Err(Error::data("trajectory: no rows"));
    }
    let dt = if rows.len() > 1 { rows[1][0] - rows[0][0] } else { default_dt };
    if !(dt > 0.0) {
        return Err(Error::data("trajectory: time stamps must increase"));
    }
    let mut t = Trajectory::new(dt);
    for r in rows {
        t.push(State::new(r[1], r[2], r[3], r[4], r[5]), Control::new(r[6], r[7]));
    }
    Ok(t)
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    Ok(fs::write(path, trajectory_to_csv(t))?)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    trajectory_from_csv(&text, 0.1)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::data(format!("dataset manifest: bad demo id '{x}'"))))
        .collect()
}

/// `dir/manifest` plus `dir/samples/NNNNNN/{map.gmb, expert.traj.csv, meta}`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    for (k, s) in ds.samples.iter().enumerate() {
        let d = samples_dir.join(format!("{k:06}"));
        fs::create_dir_all(&d)?;
        write_gridmap(&d.join("map.gmb"), &s.gridmap)?;
        write_trajectory(&d.join("expert.traj.csv"), &s.expert)?;
        fs::write(
            d.join("meta"),
            format!("demo_id={}\nwindow_start={}\ngoal_x={}\ngoal_y={}\n", s.demo_id, s.window_start, s.goal[0], s.goal[1]),
        )?;
    }
    fs::write(
        dir.join("manifest"),
        format!(
            "format=dataset1\nsamples={}\ntrain={}\ntest={}\nskipped={}\n",
            ds.samples.len(),
            join_ids(&ds.train_demos),
            join_ids(&ds.test_demos),
            ds.skipped
        ),
    )?;
    Ok(())
}

fn read_sample(d: &Path) -> Result<DemoSample> {
    const WHAT: &str = "sample meta";
    let gridmap = read_gridmap(&d.join("map.gmb"))?;
    let expert = read_trajectory(&d.join("expert.traj.csv"))?;
    let meta_text = fs::read_to_string(d.join("meta")).map_err(|e| Error::data(format!("{WHAT}: {e}")))?;
    let h = parse_kv(&meta_text, WHAT)?;
    let goal = [field(&h, "goal_x", WHAT)?, field(&h, "goal_y", WHAT)?];
    if !expert.states.iter().all(|s| gridmap.meta.contains(s.position())) {
        return Err(Error::data("expert window leaves the sample's map"));
    }
    Ok(DemoSample { demo_id: field(&h, "demo_id", WHAT)?, window_start: field(&h, "window_start", WHAT)?, gridmap, expert, goal })
}

/// Load a dataset directory. Malformed samples are skipped with a warning
/// and counted in `skipped`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = fs::read_to_string(dir.join("manifest"))
        .map_err(|e| Error::data(format!("cannot read dataset manifest in {}: {e}", dir.display())))?;
    let h = parse_kv(&manifest, "dataset manifest")?;
    if h.get("format").map(String::as_str) != Some("dataset1") {
        return Err(Error::data("dataset manifest: unknown format"));
    }
    let train_demos = parse_ids(h.get("train").map(String::as_str).unwrap_or(""))?;
    let test_demos = parse_ids(h.get("test").map(String::as_str).unwrap_or(""))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(dir.join("samples"))
        .map_err(|e| Error::data(format!("dataset samples directory: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut samples = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for d in entries {
        match read_sample(&d) {
            Ok(s) => samples.push(s),
            Err(e) => {
                warn!("skipping sample {}: {e}", d.display());
                skipped += 1;
            }
        }
    }
    Ok(Dataset { samples, train_demos, test_demos, skipped })
}

pub fn checkpoint_to_bytes(e: &Ensemble) -> Vec<u8> {
    let norm = e.norm();
    let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let header = format!(
        "kind={}\nmembers={}\nc_max={}\nchannels={}\nnorm_mean={}\nnorm_std={}\n",
        e.kind(),
        e.len(),
        e.c_max(),
        CHANNEL_NAMES.join(","),
        list(&norm.mean),
        list(&norm.std)
    );
    let per = e.kind().n_params();
    let mut out = container(CHECKPOINT_MAGIC, &header, e.len() * (4 + 4 * per));
    for m in &e.members {
        out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
        push_f32s(&mut out, m.params.iter().map(|&p| p as f32));
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Ensemble> {
    const WHAT: &str = "checkpoint";
    let (h, payload) = open_container(bytes, CHECKPOINT_MAGIC, WHAT)?;
    let kind: ModelKind = field::<String>(&h, "kind", WHAT)?.parse().map_err(|e: Error| Error::data(e.to_string()))?;
    let members: usize = field(&h, "members", WHAT)?;
    let c_max: f64 = field(&h, "c_max", WHAT)?;
    let channels: String = field(&h, "channels", WHAT)?;
    let names: Vec<&str> = channels.split(',').collect();
    if names.len() != N_CHANNELS {
        return Err(Error::config(format!("{WHAT}: model expects {} channels, maps have {N_CHANNELS}", names.len())));
    }
    check_channel_names(&names)?;
    let mean = floats(&h, "norm_mean", WHAT)?;
    let std = floats(&h, "norm_std", WHAT)?;
    if mean.len() != N_CHANNELS || std.len() != N_CHANNELS {
        return Err(Error::data(format!("{WHAT}: normalization needs {N_CHANNELS} entries")));
    }
    let norm = Normalization { mean: mean.try_into().expect("length checked"), std: std.try_into().expect("length checked") };
    let per = kind.n_params();
    let expected = members.checked_mul(4 + 4 * per).ok_or_else(|| Error::data(format!("{WHAT}: absurd size")))?;
    if payload.len() != expected {
        return Err(Error::data(format!("{WHAT}: payload has {} bytes, expected {expected}", payload.len())));
    }
    let mut models = Vec::with_capacity(members);
    for blob in payload.chunks_exact(4 + 4 * per) {
        let len = u32::from_le_bytes(blob[..4].try_into().expect("four bytes")) as usize;
        if len != per {
            return Err(Error::data(format!("{WHAT}: member blob has {len} parameters, {kind} needs {per}")));
        }
        let params = read_f32s(&blob[4..], per, WHAT)?.into_iter().map(f64::from).collect();
        models.push(CostModel::from_params(kind, c_max, norm.clone(), params)?);
    }
    Ensemble::from_members(models)
}

pub fn write_checkpoint(path: &Path, e: &Ensemble) -> Result<()> {
    Ok(fs::write(path, checkpoint_to_bytes(e))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Ensemble> {
    checkpoint_from_bytes(&read_file(path)?)
}

/// Pixel order shared by the PGM and its sidecar: rows from high y to low y,
/// columns along x.
fn image_order(c: &Costmap) -> impl Iterator<Item = f64> + '_ {
    let (nx, ny) = (c.meta.nx, c.meta.ny);
    (0..ny).rev().flat_map(move |j| (0..nx).map(move |i| c.get(i, j)))
}

/// The raw sidecar path next to a PGM.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("f32")
}

/// Write a max-normalized 8-bit PGM and a raw little-endian f32 sidecar.
pub fn write_costmap_pgm(path: &Path, c: &Costmap) -> Result<()> {
    let (_, max) = c.min_max();
    let mut pgm = format!("P5\n{} {}\n255\n", c.meta.nx, c.meta.ny).into_bytes();
    pgm.extend(image_order(c).map(|v| if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 }));
    fs::write(path, pgm)?;
    let mut raw = Vec::with_capacity(4 * c.meta.n_cells());
    push_f32s(&mut raw, image_order(c).map(|v| v as f32));
    fs::write(sidecar_path(path), raw)?;
    Ok(())
}

/// Read a PGM written by [`write_costmap_pgm`]: (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data("pgm: truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::data("pgm: only 8-bit P5 images are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::data("pgm: bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| Error::data("pgm: bad height"))?;
    let pixels = &bytes[pos + 1..];
    if pixels.len() != w * h {
        return Err(Error::data(format!("pgm: {} pixel bytes, expected {}", pixels.len(), w * h)));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Read a raw f32 sidecar holding `n` values.
pub fn read_sidecar(path: &Path, n: usize) -> Result<Vec<f32>> {
    read_f32s(&read_file(path)?, n, "costmap sidecar")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;

    fn random_map() -> GridMap {
        let mut r = seed::rng(0);
        let meta = MapMeta::centered([12.3, -4.1], [80.0, 80.0], 0.5).unwrap();
        GridMap::from_data(meta, (0..meta.n_cells() * N_CHANNELS).map(|_| r.random_range(-3.0f32..3.0)).collect()).unwrap()
    }

    #[test]
    fn gridmap_round_trip_is_bitwise() {
        let m = random_map();
        let bytes = gridmap_to_bytes(&m);
        let back = gridmap_from_bytes(&bytes).unwrap();
        assert_eq!(back.meta.origin, m.meta.origin);
        assert_eq!((back.meta.nx, back.meta.ny), (160, 160));
        assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(gridmap_to_bytes(&back), bytes);
        assert!(matches!(gridmap_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(gridmap_from_bytes(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_truncation_is_rejected() {
        let e = Ensemble::new(ModelKind::Resnet, 3, 1.0, Normalization::default(), 1).unwrap();
        let bytes = checkpoint_to_bytes(&e);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(checkpoint_to_bytes(&back), bytes);
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
    }

    #[test]
    fn trajectory_round_trip() {
        let mut t = Trajectory::new(0.1);
        for k in 0..5 {
            t.push(State::new(k as f64 * 0.37, 1.0 / 3.0, 0.1, 2.0, -0.01), Control::new(2.5, 0.02));
        }
        let text = trajectory_to_csv(&t);
        let back = trajectory_from_csv(&text, 0.1).unwrap();
        assert_eq!(back, t);
        assert_eq!(trajectory_to_csv(&back), text);
        assert!(trajectory_from_csv("a,b\n1,2\n", 0.1).is_err());
    }

    #[test]
    fn world_round_trip() {
        let w = crate::worldgen::generate_world(
            4,
            &crate::worldgen::WorldConfig { extent: 100.0, n_obstacles: 6, n_tall_grass: 2, n_bushes: 1, ..Default::default() },
        )
        .unwrap();
        let bytes = world_to_bytes(&w);
        assert_eq!(world_from_bytes(&bytes).unwrap(), w);
        assert!(world_from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn pgm_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let meta = MapMeta::new([0.0, 0.0], [2.0, 1.5], 0.5).unwrap();
        let c = Costmap::new(meta, (0..12).map(|k| k as f64).collect()).unwrap();
        let p = dir.path().join("c.pgm");
        write_costmap_pgm(&p, &c).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(px.iter().copied().max(), Some(255));
        let raw = read_sidecar(&sidecar_path(&p), 12).unwrap();
        // Top-left pixel is the cell at low x, high y.
        assert_eq!(raw[0], c.get(0, 2) as f32);
    }
}
