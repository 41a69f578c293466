//! Sampling-based MPC (MPPI) with Ornstein-Uhlenbeck control noise, and the
//! weighted state-visitation computation used as the learner distribution.

use std::time::{Duration, Instant};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::costmap::Costmap;
use crate::dynamics::{rollout_into, Control, KbmParams, Mode, State, Vehicle};
use crate::error::{Error, Result};
use crate::gridmap::MapMeta;
use crate::seed::{derive_index, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct MppiConfig {
    pub samples: usize,
    pub horizon: usize,
    pub iterations: usize,
    /// Weight on the final-state distance to goal.
    pub goal_weight: f64,
    /// Softmax temperature.
    pub temperature: f64,
    /// Per-channel noise variance over `(v_target, delta_target)`.
    pub noise_var: [f64; 2],
    /// Step size applied to the weighted noise when updating the nominal.
    pub alpha: f64,
    /// OU mean-reversion rate.
    pub ou_rate: f64,
    /// Per-step OU increments are clamped to `ou_clamp * dt`.
    pub ou_clamp: f64,
    pub dt: f64,
    pub vehicle: Vehicle,
}

impl MppiConfig {
    /// Inner-loop configuration used for IRL training and open-loop evaluation.
    pub fn irl(params: &KbmParams) -> Self {
        Self {
            samples: 2048,
            horizon: 75,
            iterations: 10,
            goal_weight: 20.0,
            temperature: 20.0,
            noise_var: [1.0, 0.1],
            alpha: 0.9,
            ou_rate: 10.0,
            ou_clamp: 5.0,
            dt: params.dt(Mode::Irl),
            vehicle: params.vehicle(Mode::Irl),
        }
    }

    /// Lighter receding-horizon configuration for closed-loop driving.
    pub fn mpc(params: &KbmParams) -> Self {
        Self {
            samples: 512,
            horizon: 60,
            iterations: 1,
            goal_weight: 10.0,
            dt: params.dt(Mode::Mpc),
            vehicle: params.vehicle(Mode::Mpc),
            ..Self::irl(params)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.samples >= 1
            && self.horizon >= 1
            && self.iterations >= 1
            && self.temperature > 0.0
            && self.noise_var.iter().all(|&s| s >= 0.0 && s.is_finite())
            && self.alpha > 0.0
            && self.alpha <= 1.0
            && self.ou_rate >= 0.0
            && self.ou_clamp > 0.0
            && self.dt > 0.0
            && self.goal_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid MPPI configuration: {self:?}")))
        }
    }
}

/// Sample `n` sequences of `h` two-channel OU perturbations, laid out
/// sample-major. Each sample draws from its own stream so generation order
/// does not affect the result.
#[allow(clippy::too_many_arguments)]
pub fn sample_ou_noise(
    n: usize,
    h: usize,
    var: [f64; 2],
    rate: f64,
    clamp: f64,
    dt: f64,
    rng: &mut Rng,
) -> Vec<[f64; 2]> {
    let base: u64 = rng.random();
    let mut out = vec![[0.0; 2]; n * h];
    fill_ou_noise(&mut out, h, var, rate, clamp, dt, base);
    out
}

fn fill_ou_noise(out: &mut [[f64; 2]], h: usize, var: [f64; 2], rate: f64, clamp: f64, dt: f64, base: u64) {
    let std = [var[0].sqrt(), var[1].sqrt()];
    let max_inc = clamp * dt;
    let sqrt_dt = dt.sqrt();
    out.par_chunks_mut(h).enumerate().for_each(|(n, seq)| {
        let mut r = ChaCha8Rng::seed_from_u64(derive_index(base, n as u64));
        for c in 0..2 {
            let w: f64 = r.sample(StandardNormal);
            let mut eps = std[c] * w;
            seq[0][c] = eps;
            for item in seq.iter_mut().skip(1) {
                let w: f64 = r.sample(StandardNormal);
                let inc = (-rate * eps * dt + std[c] * sqrt_dt * w).clamp(-max_inc, max_inc);
                eps += inc;
                item[c] = eps;
            }
        }
    });
}

/// Costmap sum over the trajectory's states plus the weighted final-state
/// distance to the goal.
pub fn trajectory_cost(states: &[State], costmap: &Costmap, goal: [f64; 2], goal_weight: f64) -> Result<f64> {
    let last = states.last().ok_or_else(|| Error::domain("trajectory is empty"))?;
    Ok(path_cost(states, costmap) + goal_weight * (last.x - goal[0]).hypot(last.y - goal[1]))
}

#[inline]
fn path_cost(states: &[State], costmap: &Costmap) -> f64 {
    states.iter().map(|s| costmap.at(s.x, s.y)).sum()
}

/// Softmax importance weights `exp(-(J - min J) / lambda) / Z`. Non-finite
/// costs receive zero weight.
pub fn importance_weights(costs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let min = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Optimization("all sample costs are non-finite".into()));
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|&c| if c.is_finite() { (-(c - min) / temperature).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    for v in &mut w {
        *v /= z;
    }
    Ok(w)
}

/// Wall time spent in each solver phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub sampling: Duration,
    pub rollout: Duration,
    pub cost: Duration,
    pub update: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.sampling + self.rollout + self.cost + self.update
    }

    pub fn add(&mut self, other: &PhaseTimings) {
        self.sampling += other.sampling;
        self.rollout += other.rollout;
        self.cost += other.cost;
        self.update += other.update;
    }
}

#[derive(Debug, Clone)]
pub struct MppiSolution {
    /// Final-round rollouts, `samples` blocks of `horizon + 1` states.
    pub states: Vec<State>,
    pub horizon: usize,
    /// Final-round importance weights, summing to one.
    pub weights: Vec<f64>,
    /// Sample costs of the final round.
    pub costs: Vec<f64>,
    pub nominal: Vec<Control>,
    pub nominal_states: Vec<State>,
    pub nominal_cost: f64,
    /// Minimum sample cost in the final round.
    pub best_cost: f64,
    pub timings: PhaseTimings,
}

impl MppiSolution {
    pub fn n_samples(&self) -> usize {
        self.weights.len()
    }

    pub fn trajectory(&self, n: usize) -> &[State] {
        let stride = self.horizon + 1;
        &self.states[n * stride..(n + 1) * stride]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[State]> {
        self.states.chunks_exact(self.horizon + 1)
    }

    /// Learner visitation distribution weighted by the final-round weights.
    pub fn visitation(&self, meta: &MapMeta) -> Result<VisitationMap> {
        let trajs: Vec<&[State]> = self.trajectories().collect();
        svf(&trajs, &self.weights, meta)
    }
}

/// Default nominal when there is no warm start: hold the current commands.
pub fn hold_controls(start: &State, horizon: usize, vehicle: &Vehicle) -> Vec<Control> {
    vec![vehicle.clamp_control(Control::new(start.v, start.delta)); horizon]
}

/// Shift a previous solution forward by one step, repeating the final control.
pub fn shift_controls(prev: &[Control]) -> Vec<Control> {
    let mut out: Vec<Control> = prev.iter().skip(1).copied().collect();
    if let Some(&last) = prev.last() {
        out.push(last);
    }
    out
}

/// Run `cfg.iterations` MPPI rounds from `start` toward `goal`.
///
/// Sample 0 of every round carries zero noise so the current nominal is always
/// among the candidates. Costs are reduced per sample in a fixed order, so the
/// result depends only on the rng state, not on thread scheduling.
pub fn solve(
    start: &State,
    goal: [f64; 2],
    costmap: &Costmap,
    cfg: &MppiConfig,
    warm_start: Option<&[Control]>,
    rng: &mut Rng,
) -> Result<MppiSolution> {
    cfg.validate()?;
    if !start.is_finite() || !goal[0].is_finite() || !goal[1].is_finite() {
        return Err(Error::domain("MPPI start and goal must be finite"));
    }
    if !costmap.meta.contains(start.position()) {
        return Err(Error::domain(format!("start {:?} lies outside the costmap", start.position())));
    }
    let (n, h) = (cfg.samples, cfg.horizon);
    let stride = h + 1;
    let vehicle = cfg.vehicle;
    let mut nominal: Vec<Control> = match warm_start {
        Some(ws) if ws.len() == h => ws.iter().map(|u| vehicle.clamp_control(*u)).collect(),
        Some(ws) => {
            return Err(Error::domain(format!("warm start has {} controls, horizon is {h}", ws.len())));
        }
        None => hold_controls(start, h, &vehicle),
    };

    let mut noise = vec![[0.0; 2]; n * h];
    let mut states = vec![State::default(); n * stride];
    let mut costs = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut timings = PhaseTimings::default();

    for _ in 0..cfg.iterations {
        let t0 = Instant::now();
        let base: u64 = rng.random();
        fill_ou_noise(&mut noise, h, cfg.noise_var, cfg.ou_rate, cfg.ou_clamp, cfg.dt, base);
        noise[..h].iter_mut().for_each(|e| *e = [0.0; 2]);
        let t1 = Instant::now();

        let nom = &nominal;
        states
            .par_chunks_mut(stride)
            .zip(noise.par_chunks_mut(h))
            .for_each_init(
                || vec![Control::default(); h],
                |controls, (traj, eps)| {
                    for t in 0..h {
                        let u = vehicle.clamp_control(Control::new(
                            nom[t].v_target + eps[t][0],
                            nom[t].delta_target + eps[t][1],
                        ));
                        // Keep only the part of the perturbation that survives clamping.
                        eps[t] = [u.v_target - nom[t].v_target, u.delta_target - nom[t].delta_target];
                        controls[t] = u;
                    }
                    rollout_into(start, controls, cfg.dt, &vehicle, traj);
                },
            );
        let t2 = Instant::now();

        costs
            .par_iter_mut()
            .zip(states.par_chunks(stride))
            .for_each(|(c, traj)| {
                let last = traj[h];
                *c = path_cost(traj, costmap) + cfg.goal_weight * (last.x - goal[0]).hypot(last.y - goal[1]);
            });
        let t3 = Instant::now();

        weights = importance_weights(&costs, cfg.temperature)?;
        let mut delta = vec![[0.0f64; 2]; h];
        for (w, eps) in weights.iter().zip(noise.chunks_exact(h)) {
            if *w == 0.0 {
                continue;
            }
            for (d, e) in delta.iter_mut().zip(eps) {
                d[0] += w * e[0];
                d[1] += w * e[1];
            }
        }
        for (u, d) in nominal.iter_mut().zip(&delta) {
            *u = vehicle.clamp_control(Control::new(
                u.v_target + cfg.alpha * d[0],
                u.delta_target + cfg.alpha * d[1],
            ));
        }
        let t4 = Instant::now();
        timings.add(&PhaseTimings { sampling: t1 - t0, rollout: t2 - t1, cost: t3 - t2, update: t4 - t3 });
    }

    let mut nominal_states = vec![State::default(); stride];
    rollout_into(start, &nominal, cfg.dt, &vehicle, &mut nominal_states);
    let nominal_cost = trajectory_cost(&nominal_states, costmap, goal, cfg.goal_weight)?;
    let best_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MppiSolution {
        states,
        horizon: h,
        weights,
        costs,
        nominal,
        nominal_states,
        nominal_cost,
        best_cost,
        timings,
    })
}

/// Normalized per-cell visitation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationMap {
    pub meta: MapMeta,
    pub values: Vec<f64>,
}

impl VisitationMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.meta.ny + j]
    }
}

/// Accumulate each trajectory's weight into the cell of every state it
/// visits, then normalize. Expert visitation uses a single trajectory with
/// weight one. States outside the map are dropped.
pub fn svf(trajectories: &[&[State]], weights: &[f64], meta: &MapMeta) -> Result<VisitationMap> {
    if trajectories.len() != weights.len() {
        return Err(Error::domain(format!(
            "{} trajectories but {} weights",
            trajectories.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::domain("visitation weights must be finite and non-negative"));
    }
    let mut values = vec![0.0; meta.n_cells()];
    for (traj, &w) in trajectories.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for s in traj.iter() {
            if let Some(k) = meta.flat_index_of(s.x, s.y) {
                values[k] += w;
            }
        }
    }
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::data("visitation distribution is empty: no weighted state inside the map"));
    }
    for v in &mut values {
        *v /= total;
    }
    Ok(VisitationMap { meta: *meta, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use approx::assert_relative_eq;

    fn small_meta() -> MapMeta {
        MapMeta::new([0.0, 0.0], [10.0, 10.0], 0.5).unwrap()
    }

    #[test]
    fn zero_variance_gives_zero_noise() {
        let e = sample_ou_noise(8, 20, [0.0, 0.0], 10.0, 5.0, 0.1, &mut rng(1));
        assert!(e.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn noise_increments_are_clamped() {
        let e = sample_ou_noise(256, 75, [1.0, 0.1], 10.0, 5.0, 0.1, &mut rng(2));
        for seq in e.chunks_exact(75) {
            for w in seq.windows(2) {
                for c in 0..2 {
                    assert!((w[1][c] - w[0][c]).abs() <= 0.5 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn trajectory_cost_examples() {
        let meta = small_meta();
        let zero = Costmap::constant(meta, 0.0).unwrap();
        let at_goal = [State::new(1.0, 1.0, 0.0, 2.0, 0.0), State::new(3.0, 1.0, 0.0, 2.0, 0.0)];
        assert_eq!(trajectory_cost(&at_goal, &zero, [3.0, 1.0], 20.0).unwrap(), 0.0);
        assert_relative_eq!(trajectory_cost(&at_goal, &zero, [3.0, 3.0], 20.0).unwrap(), 40.0);

        let mut values = vec![0.0; meta.n_cells()];
        values[meta.flat(0, 0)] = 1.0;
        values[meta.flat(1, 0)] = 2.0;
        values[meta.flat(2, 0)] = 3.0;
        let c = Costmap::new(meta, values).unwrap();
        let traj = [
            State::new(0.25, 0.25, 0.0, 2.0, 0.0),
            State::new(0.75, 0.25, 0.0, 2.0, 0.0),
            State::new(1.25, 0.25, 0.0, 2.0, 0.0),
        ];
        assert_eq!(trajectory_cost(&traj, &c, [1.25, 0.25], 20.0).unwrap(), 6.0);
        assert!(trajectory_cost(&[], &c, [0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn weights_uniform_and_degenerate() {
        let w = importance_weights(&[3.0; 5], 20.0).unwrap();
        for v in w {
            assert_relative_eq!(v, 0.2, epsilon = 1e-15);
        }
        let w = importance_weights(&[1e6, 0.0, 1e6, 1e6], 20.0).unwrap();
        assert_relative_eq!(w[1], 1.0, epsilon = 1e-12);
        assert!(importance_weights(&[f64::NAN, f64::INFINITY], 1.0).is_err());
        let w = importance_weights(&[f64::NAN, 1.0], 1.0).unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
    }

    #[test]
    fn weights_shift_invariant() {
        let costs = [1.0, 4.0, 2.5, 10.0];
        let shifted: Vec<f64> = costs.iter().map(|c| c + 123.0).collect();
        let a = importance_weights(&costs, 2.0).unwrap();
        let b = importance_weights(&shifted, 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn svf_examples() {
        let meta = small_meta();
        let traj: Vec<State> = (0..75).map(|k| State::new(0.25 + 0.5 * (k % 20) as f64, 0.25 + 0.5 * (k / 20) as f64, 0.0, 0.0, 0.0)).collect();
        let d = svf(&[&traj], &[1.0], &meta).unwrap();
        assert_eq!(d.values.iter().filter(|&&v| v > 0.0).count(), 75);
        for v in d.values.iter().filter(|&&v| v > 0.0) {
            assert_relative_eq!(*v, 1.0 / 75.0, epsilon = 1e-15);
        }

        let a = [State::new(1.1, 1.1, 0.0, 0.0, 0.0)];
        let b = [State::new(7.3, 2.2, 0.0, 0.0, 0.0)];
        let d = svf(&[&a, &b], &[0.75, 0.25], &meta).unwrap();
        assert_eq!(d.get(2, 2), 0.75);
        assert_eq!(d.get(14, 4), 0.25);

        let same = [State::new(3.3, 3.3, 0.0, 0.0, 0.0); 10];
        assert_eq!(svf(&[&same], &[1.0], &meta).unwrap().get(6, 6), 1.0);

        let outside = [State::new(-3.0, 3.3, 0.0, 0.0, 0.0)];
        assert!(matches!(svf(&[&outside], &[1.0], &meta), Err(Error::Data(_))));
        assert!(svf(&[&outside], &[1.0, 2.0], &meta).is_err());
    }

    #[test]
    fn shift_repeats_last() {
        let u = vec![Control::new(1.0, 0.0), Control::new(2.0, 0.1), Control::new(3.0, 0.2)];
        assert_eq!(shift_controls(&u), vec![u[1], u[2], u[2]]);
    }
}
