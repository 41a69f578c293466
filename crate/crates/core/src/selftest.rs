//! Quick self-checks: configuration defaults plus small brute-force oracle
//! comparisons for the numerical kernels.

use std::time::Instant;

use rand::Rng as _;

use crate::config::check_paper_defaults;
use crate::costmap::Costmap;
use crate::costmodel::{cvar_aggregate, CostModel, ModelKind, Normalization};
use crate::dynamics::State;
use crate::eval::mhd;
use crate::gridmap::{GridMap, MapMeta, N_CHANNELS};
use crate::mppi::svf;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

fn cvar_oracle(values: &[f64], nu: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let b = v.len();
    let k = (((1.0 - nu.abs()) * b as f64).ceil() as usize).clamp(1, b);
    let tail = if nu >= 0.0 { &v[b - k..] } else { &v[..k] };
    tail.iter().sum::<f64>() / k as f64
}

fn check_cvar(rng: &mut Rng, trials: usize) -> Result<String, String> {
    let meta = MapMeta::new([0.0, 0.0], [1.0, 1.0], 1.0).expect("valid");
    for t in 0..trials {
        let b = rng.random_range(1..=20);
        let values: Vec<f64> = (0..b).map(|_| rng.random_range(-5.0..5.0)).collect();
        let nu = rng.random_range(-1.0..=1.0);
        let stack: Vec<Costmap> = values.iter().map(|&v| Costmap::constant(meta, v).expect("finite")).collect();
        let got = cvar_aggregate(&stack, nu).map_err(|e| e.to_string())?.values()[0];
        let want = cvar_oracle(&values, nu);
        if (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            return Err(format!("trial {t}: cvar {got} vs oracle {want} (nu {nu}, values {values:?})"));
        }
    }
    Ok(format!("{trials} random stacks"))
}

fn check_svf(rng: &mut Rng, trials: usize) -> Result<String, String> {
    let meta = MapMeta::new([0.0, 0.0], [5.0, 4.0], 0.5).expect("valid");
    for t in 0..trials {
        let n = rng.random_range(1..6);
        let trajs: Vec<Vec<State>> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..12))
                    .map(|_| State::new(rng.random_range(-1.0..6.0), rng.random_range(-1.0..5.0), 0.0, 0.0, 0.0))
                    .collect()
            })
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut counts = vec![0.0; meta.n_cells()];
        for (tr, w) in trajs.iter().zip(&weights) {
            for s in tr {
                let fi = (s.x / 0.5).floor();
                let fj = (s.y / 0.5).floor();
                if fi >= 0.0 && fj >= 0.0 && fi < meta.nx as f64 && fj < meta.ny as f64 {
                    counts[fi as usize * meta.ny + fj as usize] += w;
                }
            }
        }
        let total: f64 = counts.iter().sum();
        let refs: Vec<&[State]> = trajs.iter().map(|t| t.as_slice()).collect();
        match svf(&refs, &weights, &meta) {
            Ok(d) => {
                for (k, (g, c)) in d.values.iter().zip(&counts).enumerate() {
                    if (g - c / total).abs() > 1e-12 {
                        return Err(format!("trial {t}: cell {k} visitation {g} vs oracle {}", c / total));
                    }
                }
            }
            Err(_) if total == 0.0 => {}
            Err(e) => return Err(format!("trial {t}: {e}")),
        }
    }
    Ok(format!("{trials} random weighted trajectory sets"))
}

fn check_mhd(rng: &mut Rng, trials: usize) -> Result<String, String> {
    for t in 0..trials {
        let mut pts = |n: usize| -> Vec<[f64; 2]> { (0..n).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect() };
        let a = pts(1 + t % 17);
        let b = pts(1 + (t * 7) % 23);
        let mut d_ab = 0.0;
        for p in &a {
            d_ab += b.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        }
        let mut d_ba = 0.0;
        for q in &b {
            d_ba += a.iter().map(|p| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        }
        let want = (d_ab / a.len() as f64).max(d_ba / b.len() as f64);
        let got = mhd(&a, &b).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 * want.max(1.0) {
            return Err(format!("trial {t}: mhd {got} vs oracle {want}"));
        }
    }
    Ok(format!("{trials} random point-set pairs"))
}

fn check_gradients(rng: &mut Rng, coords: usize) -> Result<String, String> {
    let meta = MapMeta::new([0.0, 0.0], [4.0, 3.5], 0.5).expect("valid");
    let data: Vec<f32> = (0..meta.n_cells() * N_CHANNELS).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let map = GridMap::from_data(meta, data).expect("valid map");
    let g: Vec<f64> = (0..meta.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let model = CostModel::init(kind, 1.0, Normalization::default(), rng);
        let analytic = model.backward(&map, &g).map_err(|e| e.to_string())?;
        let objective = |m: &CostModel| -> f64 {
            m.forward(&map).expect("finite").values().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        for _ in 0..coords {
            let k = rng.random_range(0..model.n_params());
            let h = 1e-6;
            let mut p = model.clone();
            p.params[k] += h;
            let mut m = model.clone();
            m.params[k] -= h;
            let numeric = (objective(&p) - objective(&m)) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-6);
            worst = worst.max(err);
            if err > 1e-4 {
                return Err(format!("{kind}: parameter {k} analytic {} vs numeric {numeric}", analytic[k]));
            }
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

/// Run every check with a fixed seed.
pub fn run_all() -> Vec<Check> {
    let mut rng = seed::rng_for(0, "selftest");
    vec![
        timed("paper defaults", || {
            let p = check_paper_defaults();
            if p.is_empty() {
                Ok("vehicle and planner tables".into())
            } else {
                Err(p.join("; "))
            }
        }),
        timed("cvar oracle", || check_cvar(&mut rng, 2000)),
        timed("svf oracle", || check_svf(&mut rng, 200)),
        timed("mhd oracle", || check_mhd(&mut rng, 200)),
        timed("finite differences", || check_gradients(&mut rng, 25)),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
