//! Maximum-entropy IRL with an MPPI inner loop.
//!
//! Each step plans on one ensemble member's costmap from the expert's start
//! to the expert's final position, and moves the member's parameters along
//! the difference between expert and learner state visitation.

use std::time::Instant;

use log::info;
use rand::Rng as _;

use crate::costmodel::{adam_step, AdamConfig, AdamState, Ensemble, ModelKind, Normalization, DEFAULT_ENSEMBLE_SIZE};
use crate::error::{Error, Result};
use crate::eval::evaluate_mhd;
use crate::mppi::{solve, svf, MppiConfig};
use crate::seed::{self, Rng};
use crate::worldgen::{DemoSample, WINDOW_LEN};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub kind: ModelKind,
    pub members: usize,
    pub c_max: f64,
    pub adam: AdamConfig,
    pub mppi: MppiConfig,
    /// Stop after this many epochs without a better validation MHD.
    pub patience: usize,
    /// Validation samples used per epoch (the first ones given).
    pub val_samples: usize,
    pub val_seeds: Vec<u64>,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, mppi: MppiConfig) -> Self {
        Self {
            epochs: 30,
            kind,
            members: DEFAULT_ENSEMBLE_SIZE,
            c_max: 1.0,
            adam: AdamConfig::default(),
            mppi,
            patience: 5,
            val_samples: 20,
            val_seeds: vec![0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mppi.validate()?;
        if self.mppi.horizon != WINDOW_LEN {
            return Err(Error::config(format!(
                "training horizon must equal the expert window length {WINDOW_LEN}, got {}",
                self.mppi.horizon
            )));
        }
        if self.members < 2 {
            return Err(Error::config("ensemble needs at least 2 members"));
        }
        if !(self.adam.lr > 0.0 && self.c_max > 0.0 && self.patience >= 1) {
            return Err(Error::config("learning rate, c_max and patience must be positive"));
        }
        if self.val_seeds.is_empty() {
            return Err(Error::config("at least one validation seed is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub member: usize,
    /// ‖D^E − D^L‖₁.
    pub svf_gap: f64,
    pub best_cost: f64,
    pub seconds: f64,
}

/// One training step on `member`. Returns `Ok(None)` when the sample is
/// skipped because no expert state lies inside its map.
pub fn train_step_member(
    sample: &DemoSample,
    ensemble: &mut Ensemble,
    member: usize,
    mppi: &MppiConfig,
    adam: &mut [AdamState],
    rng: &mut Rng,
) -> Result<Option<StepReport>> {
    if member >= ensemble.len() || adam.len() != ensemble.len() {
        return Err(Error::domain("member index or Adam state count does not match the ensemble"));
    }
    let t0 = Instant::now();
    let meta = sample.gridmap.meta;
    let start = sample.start();
    let goal = sample.expert.states.last().expect("expert windows are non-empty").position();
    let model = &ensemble.members[member];
    let costmap = model.forward(&sample.gridmap)?;
    let expert_svf = match svf(&[&sample.expert.states], &[1.0], &meta) {
        Ok(d) => d,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let sol = solve(&start, goal, &costmap, mppi, None, rng)?;
    let trajectories: Vec<&[crate::dynamics::State]> = sol.trajectories().collect();
    let learner_svf = match svf(&trajectories, &sol.weights, &meta) {
        Ok(d) => d,
        Err(Error::Data(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let grad_cost: Vec<f64> = expert_svf.values.iter().zip(&learner_svf.values).map(|(e, l)| e - l).collect();
    let svf_gap = grad_cost.iter().map(|g| g.abs()).sum();
    let grad = model.backward(&sample.gridmap, &grad_cost)?;
    adam_step(&mut ensemble.members[member].params, &grad, &mut adam[member])?;
    Ok(Some(StepReport { member, svf_gap, best_cost: sol.best_cost, seconds: t0.elapsed().as_secs_f64() }))
}

/// One training step on a uniformly drawn member.
pub fn train_step(
    sample: &DemoSample,
    ensemble: &mut Ensemble,
    mppi: &MppiConfig,
    adam: &mut [AdamState],
    rng: &mut Rng,
) -> Result<Option<StepReport>> {
    let member = rng.random_range(0..ensemble.len());
    train_step_member(sample, ensemble, member, mppi, adam, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_svf_gap: f64,
    /// NaN when no validation samples were given.
    pub val_mhd: f64,
    pub sec_per_sample: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The ensemble with the best validation MHD (the last one without
    /// validation data).
    pub ensemble: Ensemble,
    pub curve: Vec<EpochLog>,
    pub initial_val_mhd: f64,
    pub best_epoch: Option<usize>,
}

/// Bootstrap multiplicity of every training sample for every member.
fn bootstrap_counts(members: usize, n: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
    (0..members)
        .map(|_| {
            let mut counts = vec![0u32; n];
            for _ in 0..n {
                counts[rng.random_range(0..n)] += 1;
            }
            counts
        })
        .collect()
}

fn validation_mhd(ensemble: &Ensemble, val: &[&DemoSample], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let subset = &val[..val.len().min(cfg.val_samples.max(1))];
    Ok(evaluate_mhd(ensemble, subset, 0.0, &cfg.val_seeds, &cfg.mppi)?.mean)
}

/// Train a fresh ensemble. Samples are visited in a new random order every
/// epoch; each one updates a member drawn in proportion to how often that
/// member's bootstrap resample contains it.
pub fn train(train_set: &[&DemoSample], val: &[&DemoSample], cfg: &TrainConfig, seed_value: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let maps: Vec<_> = train_set.iter().map(|s| &s.gridmap).collect();
    let norm = Normalization::fit(&maps)?;
    let mut ensemble = Ensemble::new(cfg.kind, cfg.members, cfg.c_max, norm, seed_value)?;
    let mut adam: Vec<AdamState> = ensemble.members.iter().map(|m| AdamState::new(m.n_params(), cfg.adam)).collect();
    let mut rng = seed::rng_for(seed_value, "train");
    let counts = bootstrap_counts(cfg.members, train_set.len(), &mut rng);

    let initial_val_mhd = if cfg.epochs > 0 { validation_mhd(&ensemble, val, cfg)? } else { f64::NAN };
    let mut best = (initial_val_mhd, ensemble.clone(), None);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        for k in (1..n).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let (mut gap, mut secs, mut done, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for &s in &order {
            let total: u32 = counts.iter().map(|c| c[s]).sum();
            let member = if total == 0 {
                rng.random_range(0..cfg.members)
            } else {
                let mut pick = rng.random_range(0..total);
                let mut m = 0;
                while pick >= counts[m][s] {
                    pick -= counts[m][s];
                    m += 1;
                }
                m
            };
            match train_step_member(train_set[s], &mut ensemble, member, &cfg.mppi, &mut adam, &mut rng) {
                Ok(Some(r)) => {
                    gap += r.svf_gap;
                    secs += r.seconds;
                    done += 1;
                }
                Ok(None) => skipped += 1,
                Err(Error::Training(msg)) => {
                    log::warn!("sample {s} skipped: {msg}");
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if done == 0 {
            return Err(Error::Training(format!("every sample was skipped in epoch {epoch}")));
        }
        let val_mhd = validation_mhd(&ensemble, val, cfg)?;
        let entry = EpochLog {
            epoch,
            mean_svf_gap: gap / done as f64,
            val_mhd,
            sec_per_sample: secs / done as f64,
            skipped,
        };
        info!(
            "epoch {epoch}: svf gap {:.4}, val MHD {:.4}, {:.3} s/sample",
            entry.mean_svf_gap, entry.val_mhd, entry.sec_per_sample
        );
        curve.push(entry);
        if val_mhd.is_nan() || best.0.is_nan() || val_mhd < best.0 {
            best = (val_mhd, ensemble.clone(), Some(epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    Ok(TrainOutcome { ensemble: best.1, curve, initial_val_mhd, best_epoch: best.2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::CostModel;
    use crate::dynamics::{Control, KbmParams, State, Trajectory};
    use crate::gridmap::{Channel, GridMap, MapMeta, N_CHANNELS};

    fn straight_sample(center: [f64; 2]) -> DemoSample {
        let meta = MapMeta::centered(center, [80.0, 80.0], 0.5).unwrap();
        let mut gridmap = GridMap::unknown(meta);
        for i in 0..meta.nx {
            for j in 0..meta.ny {
                gridmap.set(i, j, Channel::Unknown, 0.0);
                gridmap.set(i, j, Channel::Diff, ((i * 7 + j * 3) % 5) as f32 * 0.2);
            }
        }
        let v = KbmParams::default().vehicle(crate::dynamics::Mode::Irl);
        let mut expert = Trajectory::new(0.1);
        let mut s = State::new(center[0], center[1], 0.3, 4.0, 0.0);
        for _ in 0..WINDOW_LEN {
            expert.push(s, Control::new(4.0, 0.05));
            s = crate::dynamics::step_unchecked(&s, &Control::new(4.0, 0.05), 0.1, &v);
        }
        let goal = expert.states[WINDOW_LEN - 1].position();
        DemoSample { demo_id: 0, window_start: 0, gridmap, expert, goal }
    }

    fn small_mppi() -> MppiConfig {
        let mut m = MppiConfig::irl(&KbmParams::default());
        m.samples = 128;
        m.iterations = 2;
        m
    }

    #[test]
    fn zero_epochs_returns_initial_ensemble() {
        let sample = straight_sample([20.0, 20.0]);
        let mut cfg = TrainConfig::new(ModelKind::Linear, small_mppi());
        cfg.epochs = 0;
        let out = train(&[&sample], &[], &cfg, 3).unwrap();
        assert!(out.curve.is_empty());
        let norm = Normalization::fit(&[&sample.gridmap]).unwrap();
        assert_eq!(out.ensemble, Ensemble::new(ModelKind::Linear, 16, 1.0, norm, 3).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_curve_has_epoch_entries() {
        let sample = straight_sample([20.0, 20.0]);
        let mut cfg = TrainConfig::new(ModelKind::Linear, small_mppi());
        cfg.epochs = 2;
        cfg.members = 2;
        let a = train(&[&sample], &[&sample], &cfg, 5).unwrap();
        let b = train(&[&sample], &[&sample], &cfg, 5).unwrap();
        assert_eq!(a.curve.len(), 2);
        assert_eq!(a.ensemble, b.ensemble);
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!((x.mean_svf_gap, x.val_mhd), (y.mean_svf_gap, y.val_mhd));
        }
    }

    #[test]
    fn step_reports_are_reproducible() {
        let sample = straight_sample([20.0, 20.0]);
        let run = || {
            let mut e = Ensemble::new(ModelKind::Linear, 4, 1.0, Normalization::default(), 1).unwrap();
            let mut adam: Vec<_> = e.members.iter().map(|m| AdamState::new(m.n_params(), AdamConfig::default())).collect();
            let r = train_step(&sample, &mut e, &small_mppi(), &mut adam, &mut seed::rng(8)).unwrap().unwrap();
            (r.member, r.svf_gap, r.best_cost, e)
        };
        let (a, b) = (run(), run());
        assert_eq!((a.0, a.1, a.2), (b.0, b.1, b.2));
        assert_eq!(a.3, b.3);
        assert!(a.1 >= 0.0 && a.1 <= 2.0);
    }

    #[test]
    fn over_visited_high_diff_cell_raises_diff_weight() {
        let meta = MapMeta::new([0.0, 0.0], [2.0, 1.0], 1.0).unwrap();
        let mut data = vec![0.0f32; 2 * N_CHANNELS];
        data[Channel::Diff.index()] = 0.1;
        data[N_CHANNELS + Channel::Diff.index()] = 1.0;
        let map = GridMap::from_data(meta, data).unwrap();
        let model = CostModel::init(ModelKind::Linear, 1.0, Normalization::default(), &mut seed::rng(0));
        // Expert on the low-diff cell, learner on the high-diff cell.
        let grad = model.backward(&map, &[1.0, -1.0]).unwrap();
        let mut params = model.params.clone();
        let mut st = AdamState::new(params.len(), AdamConfig::default());
        adam_step(&mut params, &grad, &mut st).unwrap();
        let d = Channel::Diff.index();
        assert!(params[d] > model.params[d]);
    }
}
