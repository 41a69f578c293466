//! Kinematic bicycle model with first-order actuator lag.
//!
//! State is `[x, y, theta, v, delta]`, control is `[v_target, delta_target]`.
//! Velocity and steering follow their targets with gains `k_v` and `k_delta`;
//! the steering rate, steering angle and speed are clamped after every step.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub x: f64,
    pub y: f64,
    /// Heading, wrapped to (-pi, pi].
    pub theta: f64,
    pub v: f64,
    pub delta: f64,
}

impl State {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, delta: f64) -> Self {
        Self { x, y, theta, v, delta }
    }

    /// Planar position, the `p(x)` extraction used by costs and visitation counts.
    #[inline]
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.theta.is_finite()
            && self.v.is_finite()
            && self.delta.is_finite()
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.theta, self.v, self.delta]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub v_target: f64,
    pub delta_target: f64,
}

impl Control {
    pub fn new(v_target: f64, delta_target: f64) -> Self {
        Self { v_target, delta_target }
    }
}

/// Time derivative of the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDot {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub delta: f64,
}

/// Which limit set applies: the IRL inner loop or the on-board MPC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Irl,
    Mpc,
}

/// Vehicle parameters for both operating modes.
#[derive(Debug, Clone, PartialEq)]
pub struct KbmParams {
    pub wheelbase: f64,
    pub k_v: f64,
    pub k_delta: f64,
    pub v_limits_irl: (f64, f64),
    pub v_limits_mpc: (f64, f64),
    pub delta_max: f64,
    /// Bound on the steering rate, rad/s.
    pub steer_rate_max: f64,
    pub dt_irl: f64,
    pub dt_mpc: f64,
}

impl Default for KbmParams {
    fn default() -> Self {
        Self {
            wheelbase: 3.0,
            k_v: 1.0,
            k_delta: 10.0,
            v_limits_irl: (2.0, 15.0),
            v_limits_mpc: (1.5, 3.5),
            delta_max: 0.52,
            steer_rate_max: 0.2,
            dt_irl: 0.1,
            dt_mpc: 0.15,
        }
    }
}

impl KbmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase > 0.0
            && self.k_v > 0.0
            && self.k_delta > 0.0
            && self.v_limits_irl.0 <= self.v_limits_irl.1
            && self.v_limits_mpc.0 <= self.v_limits_mpc.1
            && self.delta_max > 0.0
            && self.steer_rate_max > 0.0
            && self.dt_irl > 0.0
            && self.dt_mpc > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid vehicle parameters: {self:?}")))
        }
    }

    pub fn dt(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Irl => self.dt_irl,
            Mode::Mpc => self.dt_mpc,
        }
    }

    /// Resolve the mode-specific limits into a concrete vehicle.
    pub fn vehicle(&self, mode: Mode) -> Vehicle {
        let (v_min, v_max) = match mode {
            Mode::Irl => self.v_limits_irl,
            Mode::Mpc => self.v_limits_mpc,
        };
        Vehicle {
            wheelbase: self.wheelbase,
            k_v: self.k_v,
            k_delta: self.k_delta,
            v_min,
            v_max,
            delta_max: self.delta_max,
            steer_rate_max: self.steer_rate_max,
        }
    }
}

/// A vehicle with one set of limits resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub wheelbase: f64,
    pub k_v: f64,
    pub k_delta: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub delta_max: f64,
    pub steer_rate_max: f64,
}

impl Default for Vehicle {
    fn default() -> Self {
        KbmParams::default().vehicle(Mode::Irl)
    }
}

impl Vehicle {
    pub fn with_speed_limits(mut self, v_min: f64, v_max: f64) -> Self {
        self.v_min = v_min;
        self.v_max = v_max;
        self
    }

    /// Clamp a control to the actuator limits. Idempotent.
    #[inline]
    pub fn clamp_control(&self, u: Control) -> Control {
        Control {
            v_target: u.v_target.clamp(self.v_min, self.v_max),
            delta_target: u.delta_target.clamp(-self.delta_max, self.delta_max),
        }
    }

    /// Maximum curvature reachable at full steering lock.
    pub fn max_curvature(&self) -> f64 {
        self.delta_max.tan() / self.wheelbase
    }
}

/// Wrap an angle to (-pi, pi].
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    } else if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Unclamped continuous-time dynamics.
pub fn derivative(s: &State, u: &Control, vehicle: &Vehicle) -> Result<StateDot> {
    if !s.is_finite() || !u.v_target.is_finite() || !u.delta_target.is_finite() {
        return Err(Error::domain(format!("non-finite dynamics input: {s:?} {u:?}")));
    }
    Ok(derivative_unchecked(s, u, vehicle))
}

#[inline]
fn derivative_unchecked(s: &State, u: &Control, vehicle: &Vehicle) -> StateDot {
    let (sin, cos) = s.theta.sin_cos();
    StateDot {
        x: s.v * cos,
        y: s.v * sin,
        theta: s.v * s.delta.tan() / vehicle.wheelbase,
        v: vehicle.k_v * (u.v_target - s.v),
        delta: vehicle.k_delta * (u.delta_target - s.delta),
    }
}

/// One explicit Euler step with control clamping, steering-rate limiting and
/// state clamping.
pub fn step(s: &State, u: &Control, dt: f64, vehicle: &Vehicle) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("dt must be positive, got {dt}")));
    }
    derivative(s, u, vehicle)?;
    Ok(step_unchecked(s, u, dt, vehicle))
}

/// [`step`] without input validation, for the sampling hot loop.
#[inline]
pub fn step_unchecked(s: &State, u: &Control, dt: f64, vehicle: &Vehicle) -> State {
    let u = vehicle.clamp_control(*u);
    let d = derivative_unchecked(s, &u, vehicle);
    let delta_rate = d.delta.clamp(-vehicle.steer_rate_max, vehicle.steer_rate_max);
    State {
        x: s.x + dt * d.x,
        y: s.y + dt * d.y,
        theta: wrap_angle(s.theta + dt * d.theta),
        v: (s.v + dt * d.v).clamp(vehicle.v_min, vehicle.v_max),
        delta: (s.delta + dt * delta_rate).clamp(-vehicle.delta_max, vehicle.delta_max),
    }
}

/// Roll a control sequence out from `s0`; returns `controls.len() + 1` states.
pub fn rollout(s0: &State, controls: &[Control], dt: f64, vehicle: &Vehicle) -> Result<Vec<State>> {
    if controls.is_empty() {
        return Err(Error::domain("rollout needs at least one control"));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    let mut s = *s0;
    for u in controls {
        s = step(&s, u, dt, vehicle)?;
        states.push(s);
    }
    Ok(states)
}

/// Allocation-free rollout into `out`, which must hold `controls.len() + 1` states.
#[inline]
pub fn rollout_into(s0: &State, controls: &[Control], dt: f64, vehicle: &Vehicle, out: &mut [State]) {
    debug_assert_eq!(out.len(), controls.len() + 1);
    out[0] = *s0;
    for (t, u) in controls.iter().enumerate() {
        out[t + 1] = step_unchecked(&out[t], u, dt, vehicle);
    }
}

/// A recorded trajectory: states at a fixed period with the command applied
/// at each state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
    pub controls: Vec<Control>,
}

impl Trajectory {
    pub fn new(dt: f64) -> Self {
        Self { dt, states: Vec::new(), controls: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: State, u: Control) {
        self.states.push(s);
        self.controls.push(u);
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.states.iter().map(State::position).collect()
    }

    /// Sub-window `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Option<Trajectory> {
        if start + len > self.states.len() {
            return None;
        }
        Some(Trajectory {
            dt: self.dt,
            states: self.states[start..start + len].to_vec(),
            controls: self.controls[start..start + len].to_vec(),
        })
    }

    pub fn path_length(&self) -> f64 {
        path_length(&self.states)
    }
}

pub fn path_length(states: &[State]) -> f64 {
    states
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum()
}
