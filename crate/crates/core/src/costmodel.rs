//! Feature-to-cost function approximators, their ensemble, Adam updates and
//! CVaR aggregation.
//!
//! Parameters are kept in `f64` so finite-difference checks are meaningful;
//! checkpoints store them as `f32`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::costmap::Costmap;
use crate::error::{Error, Result};
use crate::gridmap::{GridMap, N_CHANNELS};
use crate::seed::{self, Rng};

/// Hidden width of the convolutional model.
pub const RESNET_WIDTH: usize = 16;
/// Residual blocks in the convolutional model.
pub const RESNET_BLOCKS: usize = 2;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Linear,
    LinearSigmoid,
    Resnet,
    ResnetSigmoid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Linear, ModelKind::LinearSigmoid, ModelKind::Resnet, ModelKind::ResnetSigmoid];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::LinearSigmoid => "linear_sigmoid",
            ModelKind::Resnet => "resnet",
            ModelKind::ResnetSigmoid => "resnet_sigmoid",
        }
    }

    pub fn is_sigmoid(self) -> bool {
        matches!(self, ModelKind::LinearSigmoid | ModelKind::ResnetSigmoid)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ModelKind::Resnet | ModelKind::ResnetSigmoid)
    }

    pub fn n_params(self) -> usize {
        if self.is_conv() {
            ResnetLayout::new().total
        } else {
            N_CHANNELS + 1
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind '{s}' (expected linear, linear_sigmoid, resnet or resnet_sigmoid)")))
    }
}

/// Per-channel standardization applied before the model sees the features.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.0; N_CHANNELS], std: [1.0; N_CHANNELS] }
    }
}

impl Normalization {
    /// Channel statistics over every cell of every map. Constant channels get
    /// unit scale.
    pub fn fit(maps: &[&GridMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::data("cannot fit normalization on an empty map set"));
        }
        let mut sum = [0.0f64; N_CHANNELS];
        let mut count = 0usize;
        for m in maps {
            for cell in m.data().chunks_exact(N_CHANNELS) {
                for (s, &v) in sum.iter_mut().zip(cell) {
                    *s += f64::from(v);
                }
            }
            count += m.meta.n_cells();
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0f64; N_CHANNELS];
        for m in maps {
            for cell in m.data().chunks_exact(N_CHANNELS) {
                for c in 0..N_CHANNELS {
                    sq[c] += (f64::from(cell[c]) - mean[c]).powi(2);
                }
            }
        }
        let std = sq.map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-6 {
                sd
            } else {
                1.0
            }
        });
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().all(|m| m.is_finite()) && self.std.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::data("normalization statistics must be finite with positive scale"))
        }
    }

    /// Standardized features as channel planes, `planes[c * n_cells + k]`.
    pub fn planes(&self, map: &GridMap) -> Vec<f64> {
        let n = map.meta.n_cells();
        let mut out = vec![0.0; N_CHANNELS * n];
        for (k, cell) in map.data().chunks_exact(N_CHANNELS).enumerate() {
            for c in 0..N_CHANNELS {
                out[c * n + k] = (f64::from(cell[c]) - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Offsets of each tensor in the flat resnet parameter vector.
#[derive(Debug, Clone, Copy)]
struct ResnetLayout {
    stem_w: usize,
    stem_b: usize,
    /// (conv a weights, conv a bias, conv b weights, conv b bias) per block.
    blocks: [[usize; 4]; RESNET_BLOCKS],
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl ResnetLayout {
    const fn new() -> Self {
        let w = RESNET_WIDTH;
        let stem_w = 0;
        let stem_b = stem_w + w * N_CHANNELS * 9;
        let mut off = stem_b + w;
        let mut blocks = [[0; 4]; RESNET_BLOCKS];
        let mut b = 0;
        while b < RESNET_BLOCKS {
            blocks[b][0] = off;
            off += w * w * 9;
            blocks[b][1] = off;
            off += w;
            blocks[b][2] = off;
            off += w * w * 9;
            blocks[b][3] = off;
            off += w;
            b += 1;
        }
        let head_w = off;
        let head_b = head_w + w;
        Self { stem_w, stem_b, blocks, head_w, head_b, total: head_b + 1 }
    }
}

/// Planes padded by one cell on every side with replicated edges.
fn pad_replicate(planes: &[f64], c: usize, nx: usize, ny: usize) -> Vec<f64> {
    let (px, py) = (nx + 2, ny + 2);
    let mut out = vec![0.0; c * px * py];
    for ch in 0..c {
        let src = &planes[ch * nx * ny..(ch + 1) * nx * ny];
        let dst = &mut out[ch * px * py..(ch + 1) * px * py];
        for p in 0..px {
            let i = p.saturating_sub(1).min(nx - 1);
            let row = &src[i * ny..(i + 1) * ny];
            let d = &mut dst[p * py..(p + 1) * py];
            d[1..=ny].copy_from_slice(row);
            d[0] = row[0];
            d[ny + 1] = row[ny - 1];
        }
    }
    out
}

/// Fold gradients on padded planes back onto the unpadded cells they copy.
fn unpad_grad(gpad: &[f64], c: usize, nx: usize, ny: usize) -> Vec<f64> {
    let (px, py) = (nx + 2, ny + 2);
    let mut out = vec![0.0; c * nx * ny];
    for ch in 0..c {
        let src = &gpad[ch * px * py..(ch + 1) * px * py];
        let dst = &mut out[ch * nx * ny..(ch + 1) * nx * ny];
        for p in 0..px {
            let i = p.saturating_sub(1).min(nx - 1);
            let s = &src[p * py..(p + 1) * py];
            let d = &mut dst[i * ny..(i + 1) * ny];
            for (dv, sv) in d.iter_mut().zip(&s[1..=ny]) {
                *dv += sv;
            }
            d[0] += s[0];
            d[ny - 1] += s[ny + 1];
        }
    }
    out
}

/// 3×3 convolution of padded input planes. Weights are `[cout][cin][3][3]`.
fn conv3x3(padded: &[f64], cin: usize, cout: usize, w: &[f64], b: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let (px, py) = (nx + 2, ny + 2);
    let n = nx * ny;
    let mut out = vec![0.0; cout * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, plane)| {
        plane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let src = &padded[ci * px * py..(ci + 1) * px * py];
            let wk: &[f64; 9] = w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9].try_into().expect("3x3 kernel");
            for i in 0..nx {
                let r = |di: usize, dj: usize| &src[(i + di) * py + dj..(i + di) * py + dj + ny];
                let rows = [r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)];
                let dst = &mut plane[i * ny..(i + 1) * ny];
                for (j, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in 0..9 {
                        acc += wk[t] * rows[t][j];
                    }
                    *d += acc;
                }
            }
        }
    });
    out
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn conv3x3_backward(
    padded: &[f64],
    cin: usize,
    cout: usize,
    w: &[f64],
    gout: &[f64],
    nx: usize,
    ny: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (px, py) = (nx + 2, ny + 2);
    let n = nx * ny;
    for co in 0..cout {
        gb[co] += gout[co * n..(co + 1) * n].iter().sum::<f64>();
    }
    gw.par_chunks_mut(9).enumerate().for_each(|(idx, gk)| {
        let (co, ci) = (idx / cin, idx % cin);
        let g = &gout[co * n..(co + 1) * n];
        let src = &padded[ci * px * py..(ci + 1) * px * py];
        for di in 0..3 {
            for dj in 0..3 {
                let mut acc = 0.0;
                for i in 0..nx {
                    let row = &src[(i + di) * py + dj..(i + di) * py + dj + ny];
                    let gr = &g[i * ny..(i + 1) * ny];
                    acc += dot(gr, row);
                }
                gk[di * 3 + dj] += acc;
            }
        }
    });
    if !want_input {
        return None;
    }
    // Gather form: each padded input cell collects from the output cells
    // whose 3x3 window covers it.
    let mut gpad = vec![0.0; cin * px * py];
    gpad.par_chunks_mut(px * py).enumerate().for_each(|(ci, dst)| {
        for co in 0..cout {
            let g = &gout[co * n..(co + 1) * n];
            let wk = &w[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
            for i in 0..nx {
                let grow = &g[i * ny..(i + 1) * ny];
                for di in 0..3 {
                    let d = &mut dst[(i + di) * py..(i + di + 1) * py];
                    let (w0, w1, w2) = (wk[di * 3], wk[di * 3 + 1], wk[di * 3 + 2]);
                    // d[j + dj] += w[dj] * g[j]
                    if ny < 2 {
                        for (dj, wv) in [w0, w1, w2].into_iter().enumerate() {
                            d[dj] += wv * grow[0];
                        }
                        continue;
                    }
                    d[0] += w0 * grow[0];
                    d[1] += w0 * grow[1] + w1 * grow[0];
                    for j in 2..ny {
                        d[j] += w0 * grow[j] + w1 * grow[j - 1] + w2 * grow[j - 2];
                    }
                    d[ny] += w1 * grow[ny - 1] + w2 * grow[ny - 2];
                    d[ny + 1] += w2 * grow[ny - 1];
                }
            }
        }
    });
    Some(gpad)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations kept for the reverse pass.
struct ResnetCache {
    x_pad: Vec<f64>,
    /// Per block: padded tanh(h_in), padded tanh(z1).
    blocks: Vec<(Vec<f64>, Vec<f64>)>,
    /// tanh of the final hidden state.
    t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub kind: ModelKind,
    /// Upper bound of the sigmoid kinds' output.
    pub c_max: f64,
    pub norm: Normalization,
    pub params: Vec<f64>,
}

impl CostModel {
    /// Linear weights ~ N(0, 0.01²); conv weights ~ N(0, 1/fan_in); biases 0.
    pub fn init(kind: ModelKind, c_max: f64, norm: Normalization, rng: &mut Rng) -> Self {
        let mut params = vec![0.0; kind.n_params()];
        if kind.is_conv() {
            let l = ResnetLayout::new();
            let w = RESNET_WIDTH;
            let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
                let d = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
                for p in &mut params[range] {
                    *p = d.sample(rng);
                }
            };
            fill(l.stem_w..l.stem_b, N_CHANNELS * 9);
            for b in 0..RESNET_BLOCKS {
                fill(l.blocks[b][0]..l.blocks[b][1], w * 9);
                fill(l.blocks[b][2]..l.blocks[b][3], w * 9);
            }
            fill(l.head_w..l.head_b, w);
        } else {
            let d = Normal::new(0.0, 0.01).expect("valid normal");
            for p in &mut params[..N_CHANNELS] {
                *p = d.sample(rng);
            }
        }
        Self { kind, c_max, norm, params }
    }

    pub fn from_params(kind: ModelKind, c_max: f64, norm: Normalization, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.n_params() {
            return Err(Error::data(format!(
                "{kind} model needs {} parameters, got {}",
                kind.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::data("non-finite model parameter"));
        }
        norm.validate()?;
        Ok(Self { kind, c_max, norm, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Predicted cost of every cell.
    pub fn forward(&self, map: &GridMap) -> Result<Costmap> {
        self.forward_normalized(&self.norm.planes(map), map)
    }

    /// [`forward`](Self::forward) on planes already normalized with this model's statistics.
    fn forward_normalized(&self, x: &[f64], map: &GridMap) -> Result<Costmap> {
        let (raw, _) = self.forward_planes(x, map.meta.nx, map.meta.ny);
        let values = if self.kind.is_sigmoid() {
            raw.into_iter().map(|z| self.c_max * sigmoid(z)).collect()
        } else {
            raw
        };
        Costmap::new(map.meta, values)
    }

    /// Gradient over the parameters of `Σ grad[k] · C[k]`.
    pub fn backward(&self, map: &GridMap, grad: &[f64]) -> Result<Vec<f64>> {
        let meta = map.meta;
        if grad.len() != meta.n_cells() {
            return Err(Error::domain(format!("cost gradient has {} cells, map has {}", grad.len(), meta.n_cells())));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::domain("cost gradient must be finite"));
        }
        let x = self.norm.planes(map);
        let (raw, cache) = self.forward_planes(&x, meta.nx, meta.ny);
        let g_raw: Vec<f64> = if self.kind.is_sigmoid() {
            raw.iter()
                .zip(grad)
                .map(|(&z, &g)| {
                    let s = sigmoid(z);
                    g * self.c_max * s * (1.0 - s)
                })
                .collect()
        } else {
            grad.to_vec()
        };
        Ok(match cache {
            None => self.linear_backward(&x, &g_raw, meta.n_cells()),
            Some(cache) => self.resnet_backward(&cache, &g_raw, meta.nx, meta.ny),
        })
    }

    /// Pre-activation output; for conv kinds also the reverse-pass cache.
    fn forward_planes(&self, x: &[f64], nx: usize, ny: usize) -> (Vec<f64>, Option<ResnetCache>) {
        let n = nx * ny;
        if !self.kind.is_conv() {
            let w = &self.params[..N_CHANNELS];
            let b = self.params[N_CHANNELS];
            let mut out = vec![b; n];
            for c in 0..N_CHANNELS {
                for (o, v) in out.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                    *o += w[c] * v;
                }
            }
            return (out, None);
        }
        let l = ResnetLayout::new();
        let p = &self.params;
        let wd = RESNET_WIDTH;
        let x_pad = pad_replicate(x, N_CHANNELS, nx, ny);
        let mut h = conv3x3(&x_pad, N_CHANNELS, wd, &p[l.stem_w..l.stem_b], &p[l.stem_b..l.stem_b + wd], nx, ny);
        let mut blocks = Vec::with_capacity(RESNET_BLOCKS);
        for b in 0..RESNET_BLOCKS {
            let [wa, ba, wb, bb] = l.blocks[b];
            let a: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
            let a_pad = pad_replicate(&a, wd, nx, ny);
            let z1 = conv3x3(&a_pad, wd, wd, &p[wa..ba], &p[ba..ba + wd], nx, ny);
            let a2: Vec<f64> = z1.iter().map(|v| v.tanh()).collect();
            let a2_pad = pad_replicate(&a2, wd, nx, ny);
            let z2 = conv3x3(&a2_pad, wd, wd, &p[wb..bb], &p[bb..bb + wd], nx, ny);
            for (hv, zv) in h.iter_mut().zip(&z2) {
                *hv += zv;
            }
            blocks.push((a_pad, a2_pad));
        }
        let t: Vec<f64> = h.iter().map(|v| v.tanh()).collect();
        let mut out = vec![p[l.head_b]; n];
        for c in 0..wd {
            let wc = p[l.head_w + c];
            for (o, tv) in out.iter_mut().zip(&t[c * n..(c + 1) * n]) {
                *o += wc * tv;
            }
        }
        (out, Some(ResnetCache { x_pad, blocks, t }))
    }

    fn linear_backward(&self, x: &[f64], g: &[f64], n: usize) -> Vec<f64> {
        let mut grad = vec![0.0; N_CHANNELS + 1];
        for c in 0..N_CHANNELS {
            grad[c] = x[c * n..(c + 1) * n].iter().zip(g).map(|(a, b)| a * b).sum();
        }
        grad[N_CHANNELS] = g.iter().sum();
        grad
    }

    fn resnet_backward(&self, cache: &ResnetCache, g_out: &[f64], nx: usize, ny: usize) -> Vec<f64> {
        let l = ResnetLayout::new();
        let p = &self.params;
        let wd = RESNET_WIDTH;
        let n = nx * ny;
        let mut grad = vec![0.0; l.total];

        grad[l.head_b] = g_out.iter().sum();
        let mut gh = vec![0.0; wd * n];
        for c in 0..wd {
            let t = &cache.t[c * n..(c + 1) * n];
            grad[l.head_w + c] = t.iter().zip(g_out).map(|(a, b)| a * b).sum();
            let wc = p[l.head_w + c];
            for ((dst, tv), gv) in gh[c * n..(c + 1) * n].iter_mut().zip(t).zip(g_out) {
                *dst = wc * gv * (1.0 - tv * tv);
            }
        }

        let interior = |padded: &[f64], c: usize, i: usize, j: usize| padded[c * (nx + 2) * (ny + 2) + (i + 1) * (ny + 2) + j + 1];
        for b in (0..RESNET_BLOCKS).rev() {
            let [wa, ba, wb, bb] = l.blocks[b];
            let (a_pad, a2_pad) = &cache.blocks[b];
            let (gw_lo, gw_hi) = grad.split_at_mut(bb);
            let g_a2_pad = conv3x3_backward(a2_pad, wd, wd, &p[wb..bb], &gh, nx, ny, &mut gw_lo[wb..bb], &mut gw_hi[..wd], true)
                .expect("input gradient requested");
            let mut gz1 = unpad_grad(&g_a2_pad, wd, nx, ny);
            for c in 0..wd {
                for i in 0..nx {
                    for j in 0..ny {
                        let a2 = interior(a2_pad, c, i, j);
                        gz1[c * n + i * ny + j] *= 1.0 - a2 * a2;
                    }
                }
            }
            let (gw_lo, gw_hi) = grad.split_at_mut(ba);
            let g_a_pad = conv3x3_backward(a_pad, wd, wd, &p[wa..ba], &gz1, nx, ny, &mut gw_lo[wa..ba], &mut gw_hi[..wd], true)
                .expect("input gradient requested");
            let ga = unpad_grad(&g_a_pad, wd, nx, ny);
            for c in 0..wd {
                for i in 0..nx {
                    for j in 0..ny {
                        let a = interior(a_pad, c, i, j);
                        gh[c * n + i * ny + j] += ga[c * n + i * ny + j] * (1.0 - a * a);
                    }
                }
            }
        }
        let (gw_lo, gw_hi) = grad.split_at_mut(l.stem_b);
        conv3x3_backward(&cache.x_pad, N_CHANNELS, wd, &p[l.stem_w..l.stem_b], &gh, nx, ny, &mut gw_lo[l.stem_w..], &mut gw_hi[..wd], false);
        grad
    }
}

/// Bias-corrected Adam state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One descent step. A non-finite gradient leaves everything untouched and
/// returns a training error.
pub fn adam_step(params: &mut [f64], grad: &[f64], st: &mut AdamState) -> Result<()> {
    if params.len() != grad.len() || st.m.len() != params.len() || st.v.len() != params.len() {
        return Err(Error::domain(format!(
            "Adam shape mismatch: {} parameters, {} gradients, {} moments",
            params.len(),
            grad.len(),
            st.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training("non-finite gradient, update skipped".into()));
    }
    st.t += 1;
    let bc1 = 1.0 - st.beta1.powi(st.t as i32);
    let bc2 = 1.0 - st.beta2.powi(st.t as i32);
    for k in 0..params.len() {
        st.m[k] = st.beta1 * st.m[k] + (1.0 - st.beta1) * grad[k];
        st.v[k] = st.beta2 * st.v[k] + (1.0 - st.beta2) * grad[k] * grad[k];
        let m_hat = st.m[k] / bc1;
        let v_hat = st.v[k] / bc2;
        params[k] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
    }
    Ok(())
}

/// Number of tail members averaged at risk level `nu` out of `b`.
pub fn cvar_tail_size(nu: f64, b: usize) -> usize {
    (((1.0 - nu.abs()) * b as f64).ceil() as usize).clamp(1, b)
}

/// CVaR of one cell's ensemble values. `scratch` is reused for sorting.
///
/// Tail means are computed for every tail size and then made monotone in
/// the tail size, so rounding can never break the ordering across `nu`.
pub fn cvar_cell(values: &[f64], nu: f64, scratch: &mut Vec<f64>) -> f64 {
    let b = values.len();
    scratch.clear();
    scratch.extend_from_slice(values);
    scratch.sort_by(f64::total_cmp);
    let (lo, hi) = (scratch[0], scratch[b - 1]);
    let mean = scratch.iter().sum::<f64>() / b as f64;
    let k = cvar_tail_size(nu, b);
    if k == b {
        return mean.clamp(lo, hi);
    }
    // Walk from the extreme inward; tail means of larger k bound smaller k.
    // Tail means live after the sorted values: scratch[b + m] for tail size m.
    let upper = nu >= 0.0;
    let mut sum = 0.0;
    scratch.push(0.0);
    for m in 1..=b {
        sum += if upper { scratch[b - m] } else { scratch[m - 1] };
        scratch.push(sum / m as f64);
    }
    scratch[2 * b] = mean;
    for m in (k..b).rev() {
        let next = scratch[b + m + 1];
        let t = &mut scratch[b + m];
        *t = if upper { t.max(next) } else { t.min(next) };
    }
    scratch[b + k].clamp(lo, hi)
}

/// Per-cell CVaR over a stack of costmaps. `nu = 0` is the ensemble mean,
/// `nu = 1` the max and `nu = -1` the min.
pub fn cvar_aggregate(stack: &[Costmap], nu: f64) -> Result<Costmap> {
    let first = stack.first().ok_or_else(|| Error::domain("CVaR needs at least one costmap"))?;
    if !(-1.0..=1.0).contains(&nu) {
        return Err(Error::domain(format!("risk level must lie in [-1, 1], got {nu}")));
    }
    let meta = first.meta;
    if stack.iter().any(|c| c.meta != meta) {
        return Err(Error::domain("all costmaps in a CVaR stack must share their grid"));
    }
    let n = meta.n_cells();
    let mut out = vec![0.0; n];
    out.par_chunks_mut(256).enumerate().for_each_init(
        || (Vec::with_capacity(stack.len()), Vec::with_capacity(stack.len())),
        |(vals, scratch), (chunk, dst)| {
            for (off, d) in dst.iter_mut().enumerate() {
                let k = chunk * 256 + off;
                vals.clear();
                vals.extend(stack.iter().map(|c| c.values()[k]));
                *d = cvar_cell(vals, nu, scratch);
            }
        },
    );
    Costmap::new(meta, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<CostModel>,
}

impl Ensemble {
    /// `b` independently initialized members; member `m` draws from its own
    /// seed stream.
    pub fn new(kind: ModelKind, b: usize, c_max: f64, norm: Normalization, seed: u64) -> Result<Self> {
        if b < 2 {
            return Err(Error::config(format!("ensemble needs at least 2 members, got {b}")));
        }
        if kind.is_sigmoid() && !(c_max > 0.0) {
            return Err(Error::config("sigmoid models need a positive c_max"));
        }
        norm.validate()?;
        let base = seed::derive(seed, "ensemble");
        let members = (0..b)
            .map(|m| CostModel::init(kind, c_max, norm.clone(), &mut seed::rng(seed::derive_index(base, m as u64))))
            .collect();
        Ok(Self { members })
    }

    pub fn from_members(members: Vec<CostModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::data("ensemble has no members"))?;
        if members.len() < 2 {
            return Err(Error::data("ensemble needs at least 2 members"));
        }
        if members.iter().any(|m| m.kind != first.kind || m.norm != first.norm || m.c_max != first.c_max) {
            return Err(Error::data("ensemble members disagree on kind, normalization or c_max"));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn kind(&self) -> ModelKind {
        self.members[0].kind
    }

    pub fn norm(&self) -> &Normalization {
        &self.members[0].norm
    }

    pub fn c_max(&self) -> f64 {
        self.members[0].c_max
    }

    /// Every member's costmap.
    pub fn predict_all(&self, map: &GridMap) -> Result<Vec<Costmap>> {
        match self.members.first() {
            Some(first) if self.members.iter().all(|m| m.norm == first.norm) => {
                let x = first.norm.planes(map);
                self.members.par_iter().map(|m| m.forward_normalized(&x, map)).collect()
            }
            _ => self.members.par_iter().map(|m| m.forward(map)).collect(),
        }
    }

    pub fn cvar(&self, map: &GridMap, nu: f64) -> Result<Costmap> {
        cvar_aggregate(&self.predict_all(map)?, nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{Channel, MapMeta};
    use approx::assert_relative_eq;
    use rand::Rng as _;

    fn random_map(nx: usize, ny: usize, rng: &mut Rng) -> GridMap {
        let meta = MapMeta::new([0.0, 0.0], [nx as f64 * 0.5, ny as f64 * 0.5], 0.5).unwrap();
        let data = (0..nx * ny * N_CHANNELS).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        GridMap::from_data(meta, data).unwrap()
    }

    fn stack_of(values: &[f64]) -> Vec<Costmap> {
        let meta = MapMeta::new([0.0, 0.0], [1.0, 1.0], 1.0).unwrap();
        values.iter().map(|&v| Costmap::constant(meta, v).unwrap()).collect()
    }

    #[test]
    fn zero_linear_model_gives_zero_costmap() {
        let map = random_map(6, 5, &mut seed::rng(0));
        let m = CostModel::from_params(ModelKind::Linear, 1.0, Normalization::default(), vec![0.0; 13]).unwrap();
        assert!(m.forward(&map).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_linear_picks_diff_layer() {
        let map = random_map(6, 5, &mut seed::rng(1));
        let mut p = vec![0.0; 13];
        p[Channel::Diff.index()] = 1.0;
        let m = CostModel::from_params(ModelKind::Linear, 1.0, Normalization::default(), p).unwrap();
        let c = m.forward(&map).unwrap();
        let diff = map.layer(Channel::Diff);
        for (a, b) in c.values().iter().zip(diff) {
            assert_eq!(*a, f64::from(b));
        }
    }

    #[test]
    fn sigmoid_saturates_at_c_max() {
        let map = random_map(4, 4, &mut seed::rng(2));
        let mut p = vec![0.0; 13];
        p[12] = 800.0;
        let m = CostModel::from_params(ModelKind::LinearSigmoid, 1.0, Normalization::default(), p).unwrap();
        assert!(m.forward(&map).unwrap().values().iter().all(|&v| v == 1.0));
        let r = CostModel::init(ModelKind::ResnetSigmoid, 2.0, Normalization::default(), &mut seed::rng(3));
        assert!(r.forward(&map).unwrap().values().iter().all(|&v| v > 0.0 && v < 2.0));
    }

    #[test]
    fn linear_backward_single_cell() {
        let map = random_map(5, 5, &mut seed::rng(4));
        let m = CostModel::init(ModelKind::Linear, 1.0, Normalization::default(), &mut seed::rng(5));
        let mut g = vec![0.0; 25];
        g[7] = 2.5;
        let grad = m.backward(&map, &g).unwrap();
        for c in 0..N_CHANNELS {
            assert_relative_eq!(grad[c], 2.5 * f64::from(map.cell(1, 2)[c]), max_relative = 1e-12);
        }
        assert_eq!(grad[12], 2.5);
        assert!(m.backward(&map, &[0.0; 25]).unwrap().iter().all(|&v| v == 0.0));
    }

    fn finite_difference_check(kind: ModelKind, seed_value: u64) {
        let mut r = seed::rng(seed_value);
        let map = random_map(7, 6, &mut r);
        let norm = Normalization { mean: [0.1; N_CHANNELS], std: [0.8; N_CHANNELS] };
        let model = CostModel::init(kind, 1.5, norm, &mut r);
        let g: Vec<f64> = (0..42).map(|_| r.random_range(-1.0..1.0)).collect();
        let analytic = model.backward(&map, &g).unwrap();
        let objective = |m: &CostModel| -> f64 { m.forward(&map).unwrap().values().iter().zip(&g).map(|(a, b)| a * b).sum() };
        let n = model.n_params();
        let coords: Vec<usize> = if n <= 100 { (0..n).collect() } else { (0..100).map(|_| r.random_range(0..n)).collect() };
        for k in coords {
            let h = 1e-6;
            let mut plus = model.clone();
            plus.params[k] += h;
            let mut minus = model.clone();
            minus.params[k] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-6);
            assert!(err <= 1e-4, "{kind}: coordinate {k} analytic {} numeric {numeric}", analytic[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (s, kind) in ModelKind::ALL.into_iter().enumerate() {
            finite_difference_check(kind, 100 + s as u64);
        }
    }

    #[test]
    fn resnet_is_translation_equivariant_in_the_interior() {
        let mut r = seed::rng(9);
        let (nx, ny) = (20, 18);
        let big = random_map(nx + 1, ny, &mut r);
        let meta = MapMeta::new([0.0, 0.0], [nx as f64 * 0.5, ny as f64 * 0.5], 0.5).unwrap();
        let crop = |start: usize| {
            let mut data = Vec::with_capacity(nx * ny * N_CHANNELS);
            for i in start..start + nx {
                for j in 0..ny {
                    data.extend_from_slice(big.cell(i, j));
                }
            }
            GridMap::from_data(meta, data).unwrap()
        };
        let model = CostModel::init(ModelKind::Resnet, 1.0, Normalization::default(), &mut r);
        let a = model.forward(&crop(0)).unwrap();
        let b = model.forward(&crop(1)).unwrap();
        let margin = 6;
        for i in margin..nx - margin {
            for j in margin..ny - margin {
                assert_eq!(a.get(i + 1, j), b.get(i, j));
            }
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3, AdamConfig { lr: 0.01, ..AdamConfig::default() });
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut st).unwrap();
        assert_relative_eq!(p[0], 0.99, epsilon = 1e-6);
        assert_relative_eq!(p[1], -1.99, epsilon = 1e-6);
        assert_relative_eq!(p[2], 0.49, epsilon = 1e-4);
        assert_eq!(st.t, 1);

        let before = p.clone();
        let m_before = st.m.clone();
        adam_step(&mut p, &[0.0; 3], &mut st).unwrap();
        for k in 0..3 {
            assert_relative_eq!(st.m[k], 0.9 * m_before[k]);
        }
        assert!(p.iter().zip(&before).all(|(a, b)| (a - b).abs() < 0.011));
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &[f64::NAN, 0.0], &mut st), Err(Error::Training(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn cvar_examples() {
        let s = stack_of(&[3.0, 1.0, 4.0, 2.0]);
        let at = |nu: f64| cvar_aggregate(&s, nu).unwrap().values()[0];
        assert_eq!(at(0.0), 2.5);
        assert_eq!(at(0.5), 3.5);
        assert_eq!(at(-0.5), 1.5);
        assert_eq!(at(1.0), 4.0);
        assert_eq!(at(-1.0), 1.0);
        assert!(cvar_aggregate(&[], 0.0).is_err());
        assert!(cvar_aggregate(&s, 1.5).is_err());
    }

    #[test]
    fn ensemble_members_differ_and_share_kind() {
        let e = Ensemble::new(ModelKind::Linear, 16, 1.0, Normalization::default(), 7).unwrap();
        assert_eq!(e.len(), 16);
        assert_ne!(e.members[0].params, e.members[1].params);
        assert_eq!(e, Ensemble::new(ModelKind::Linear, 16, 1.0, Normalization::default(), 7).unwrap());
        assert!(Ensemble::new(ModelKind::Linear, 1, 1.0, Normalization::default(), 7).is_err());
        assert_eq!("resnet_sigmoid".parse::<ModelKind>().unwrap(), ModelKind::ResnetSigmoid);
        assert!(matches!("mlp".parse::<ModelKind>(), Err(Error::Config(_))));
    }
}
