//! Vehicle plant: command mapping, per-channel first-order-plus-dead-time
//! (FOPDT) actuators and kinematic bicycle motion.
//!
//! Dead time is realized with timestamped due-times on a delay line, so the
//! response does not depend on how finely the plant is stepped. Between
//! due-times the first-order lag uses the exact discrete update
//! `actual += (1 - exp(-dt / tau_p)) * (K * setpoint - actual)`.

mod identify;

pub use identify::{fit_fopdt, run_step_experiment, FopdtFit, IdentifyError, StepLog, StepSample};

use std::collections::VecDeque;
use std::f64::consts::LN_10;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec2};
use crate::rng::RngStream;
use crate::spatial::TrajectorySample;
use crate::timebase::{secs_to_ns, TimestampNs};

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("step dt {dt} s outside (0, {max}]")]
    StepSize { dt: f64, max: f64 },
    #[error("non-finite command")]
    NonFinite,
    #[error("unknown plant preset `{0}`")]
    UnknownPreset(String),
}

/// Gain, time constant (s) and dead time (s) of one actuator channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FopdtParams {
    pub gain: f64,
    pub tau_p: f64,
    pub dead_time: f64,
}

impl FopdtParams {
    /// Recover the time constant from a measured 90% response time using
    /// `t90 = L + tau_p * ln 10`.
    pub fn from_t90(gain: f64, t90: f64, dead_time: f64) -> Self {
        Self { gain, tau_p: (t90 - dead_time) / LN_10, dead_time }
    }

    pub fn t90(&self) -> f64 {
        self.dead_time + self.tau_p * LN_10
    }

    pub fn validate(&self, name: &str) -> Result<(), PlantError> {
        if !(self.tau_p.is_finite() && self.tau_p > 0.0) {
            return Err(PlantError::Config(format!("{name}.tau_p must be > 0")));
        }
        if !(self.dead_time.is_finite() && self.dead_time >= 0.0) {
            return Err(PlantError::Config(format!("{name}.dead_time must be >= 0")));
        }
        if !(self.gain.is_finite() && self.gain != 0.0) {
            return Err(PlantError::Config(format!("{name}.gain must be finite and nonzero")));
        }
        Ok(())
    }
}

/// Piecewise-linear calibration table from raw command to setpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMap {
    /// `(command, setpoint)` knots, sorted by command.
    pub points: Vec<(f64, f64)>,
}

impl CommandMap {
    pub fn identity(limit: f64) -> Self {
        Self { points: vec![(-limit, -limit), (limit, limit)] }
    }

    pub fn scaled(limit: f64, factor: f64) -> Self {
        Self { points: vec![(-limit, -limit * factor), (limit, limit * factor)] }
    }

    pub fn validate(&self, name: &str) -> Result<(), PlantError> {
        if self.points.len() < 2 {
            return Err(PlantError::Config(format!("{name}: command map needs >= 2 points")));
        }
        for w in self.points.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PlantError::Config(format!("{name}: command knots must strictly increase")));
            }
            if w[1].1 < w[0].1 {
                return Err(PlantError::Config(format!("{name}: command map must be non-decreasing")));
            }
        }
        if self.points.iter().any(|(c, s)| !c.is_finite() || !s.is_finite()) {
            return Err(PlantError::Config(format!("{name}: non-finite knot")));
        }
        Ok(())
    }

    /// Interpolate; commands outside the table clamp to the end knots and
    /// report `true`.
    pub fn map(&self, command: f64) -> (f64, bool) {
        let first = self.points[0];
        let last = *self.points.last().expect("validated");
        if command <= first.0 {
            return (first.1, command < first.0);
        }
        if command >= last.0 {
            return (last.1, command > last.0);
        }
        let k = self.points.partition_point(|p| p.0 <= command);
        let (c0, s0) = self.points[k - 1];
        let (c1, s1) = self.points[k];
        (s0 + (s1 - s0) * (command - c0) / (c1 - c0), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMaps {
    pub steering: CommandMap,
    pub velocity: CommandMap,
}

/// Optional per-command dead-time variation: each command's dead time is
/// `L * exp(sigma * z)` with `z ~ N(0, 1)`, so `L` is the median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadTimeJitter {
    pub steering_sigma: f64,
    pub velocity_sigma: f64,
}

impl DeadTimeJitter {
    /// Log-spreads placing the 95th percentile at the characterized values
    /// (35.2 ms steering, 92.3 ms velocity) over the median dead time.
    pub fn characterized() -> Self {
        const Z95: f64 = 1.6448536269514722;
        Self {
            steering_sigma: (35.2f64 / 7.2).ln() / Z95,
            velocity_sigma: (92.3f64 / 23.6).ln() / Z95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub wheelbase: f64,
    pub steering: FopdtParams,
    pub velocity: FopdtParams,
    pub command_map: CommandMaps,
    pub max_steer: f64,
    pub max_speed: f64,
    /// Longest integration step, seconds.
    pub control_period: f64,
    #[serde(default)]
    pub dead_time_jitter: Option<DeadTimeJitter>,
}

pub const STEERING_T90: f64 = 0.85;
pub const STEERING_DEAD_TIME: f64 = 0.0072;
pub const VELOCITY_T90: f64 = 0.53;
pub const VELOCITY_DEAD_TIME: f64 = 0.0236;

impl PlantConfig {
    /// Unit-gain preset with the characterized time constants and dead times.
    pub fn calibrated() -> Self {
        let max_steer = 0.5;
        let max_speed = 2.0;
        Self {
            wheelbase: 0.1,
            steering: FopdtParams::from_t90(1.0, STEERING_T90, STEERING_DEAD_TIME),
            velocity: FopdtParams::from_t90(1.0, VELOCITY_T90, VELOCITY_DEAD_TIME),
            command_map: CommandMaps {
                steering: CommandMap::identity(max_steer),
                velocity: CommandMap::identity(max_speed),
            },
            max_steer,
            max_speed,
            control_period: 0.005,
            dead_time_jitter: None,
        }
    }

    /// Gains as measured before calibration: longitudinal over-response of
    /// 2.11 and steering gain 0.26.
    pub fn paper_uncalibrated() -> Self {
        let mut cfg = Self::calibrated();
        cfg.steering.gain = 0.26;
        cfg.velocity.gain = 2.11;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self, PlantError> {
        match name {
            "calibrated" => Ok(Self::calibrated()),
            "paper-uncalibrated" => Ok(Self::paper_uncalibrated()),
            other => Err(PlantError::UnknownPreset(other.to_owned())),
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(PlantError::Config(format!("{name} must be > 0")))
            }
        };
        pos(self.wheelbase, "wheelbase")?;
        pos(self.max_steer, "max_steer")?;
        pos(self.max_speed, "max_speed")?;
        pos(self.control_period, "control_period")?;
        self.steering.validate("steering")?;
        self.velocity.validate("velocity")?;
        self.command_map.steering.validate("command_map.steering")?;
        self.command_map.velocity.validate("command_map.velocity")?;
        if let Some(j) = self.dead_time_jitter {
            if !(j.steering_sigma >= 0.0 && j.velocity_sigma >= 0.0) {
                return Err(PlantError::Config("dead_time_jitter sigmas must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Steering,
    Velocity,
}

/// One FOPDT actuator with its delay line.
#[derive(Debug, Clone)]
struct Actuator {
    params: FopdtParams,
    /// Clamp on `K * setpoint`.
    limit: f64,
    actual: f64,
    in_effect: f64,
    pending: VecDeque<(TimestampNs, f64)>,
}

impl Actuator {
    fn new(params: FopdtParams, limit: f64) -> Self {
        Self { params, limit, actual: 0.0, in_effect: 0.0, pending: VecDeque::new() }
    }

    fn enqueue(&mut self, due: TimestampNs, setpoint: f64) {
        // A later command never overtakes an earlier one on the line.
        let due = self.pending.back().map_or(due, |&(last, _)| due.max(last));
        self.pending.push_back((due, setpoint));
    }

    fn next_due(&self) -> Option<TimestampNs> {
        self.pending.front().map(|&(t, _)| t)
    }

    /// Release every setpoint due at or before `t`.
    fn release(&mut self, t: TimestampNs) {
        while let Some(&(due, sp)) = self.pending.front() {
            if due > t {
                break;
            }
            self.in_effect = sp;
            self.pending.pop_front();
        }
    }

    fn relax(&mut self, dt: f64) {
        let target = (self.params.gain * self.in_effect).clamp(-self.limit, self.limit);
        self.actual += (1.0 - (-dt / self.params.tau_p).exp()) * (target - self.actual);
    }
}

/// Raw command as it leaves the V2R link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCommand {
    pub speed: f64,
    pub steer: f64,
}

/// What the command map did with a raw command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedSetpoints {
    pub speed: f64,
    pub steer: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    t: TimestampNs,
    pose: TrajectorySample,
    steer: Actuator,
    speed: Actuator,
    jitter_rng: RngStream,
}

impl Plant {
    pub fn new(cfg: PlantConfig, start: TrajectorySample, seed: u64) -> Result<Self, PlantError> {
        cfg.validate()?;
        let steer_limit = cfg.max_steer;
        let speed_limit = cfg.max_speed * cfg.velocity.gain.abs().max(1.0);
        Ok(Self {
            steer: Actuator::new(cfg.steering, steer_limit),
            speed: Actuator::new(cfg.velocity, speed_limit),
            t: start.t,
            pose: start,
            cfg,
            jitter_rng: RngStream::new(seed, "plant.deadtime"),
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn time(&self) -> TimestampNs {
        self.t
    }

    pub fn pose(&self) -> TrajectorySample {
        self.pose
    }

    pub fn v_actual(&self) -> f64 {
        self.speed.actual
    }

    pub fn steer_actual(&self) -> f64 {
        self.steer.actual
    }

    /// World-frame velocity of the rear axle reference point.
    pub fn velocity(&self) -> Vec2 {
        Vec2::from_polar(self.speed.actual, self.pose.heading)
    }

    fn dead_time_ns(&mut self, channel: Channel) -> u64 {
        let (base, sigma) = match channel {
            Channel::Steering => (self.cfg.steering.dead_time, self.cfg.dead_time_jitter.map(|j| j.steering_sigma)),
            Channel::Velocity => (self.cfg.velocity.dead_time, self.cfg.dead_time_jitter.map(|j| j.velocity_sigma)),
        };
        let l = match sigma {
            Some(s) if s > 0.0 => {
                let z: f64 = StandardNormal.sample(&mut self.jitter_rng);
                base * (s * z).exp()
            }
            _ => base,
        };
        secs_to_ns(l)
    }

    /// Map a raw command and put both setpoints on their delay lines at the
    /// current plant time.
    pub fn apply(&mut self, cmd: RawCommand) -> Result<AppliedSetpoints, PlantError> {
        if !(cmd.speed.is_finite() && cmd.steer.is_finite()) {
            return Err(PlantError::NonFinite);
        }
        let (sp_speed, c1) = self.cfg.command_map.velocity.map(cmd.speed);
        let (sp_steer, c2) = self.cfg.command_map.steering.map(cmd.steer);
        let sp_speed_c = sp_speed.clamp(-self.cfg.max_speed, self.cfg.max_speed);
        let sp_steer_c = sp_steer.clamp(-self.cfg.max_steer, self.cfg.max_steer);
        let clamped = c1 || c2 || sp_speed_c != sp_speed || sp_steer_c != sp_steer;
        let ls = self.dead_time_ns(Channel::Steering);
        let lv = self.dead_time_ns(Channel::Velocity);
        self.steer.enqueue(self.t + ls, sp_steer_c);
        self.speed.enqueue(self.t + lv, sp_speed_c);
        Ok(AppliedSetpoints { speed: sp_speed_c, steer: sp_steer_c, clamped })
    }

    /// Apply an optional command, then integrate forward `dt` seconds
    /// (`0 < dt <= control_period`).
    pub fn step(&mut self, command: Option<RawCommand>, dt: f64) -> Result<(), PlantError> {
        if !(dt.is_finite() && dt > 0.0 && dt <= self.cfg.control_period + 1e-12) {
            return Err(PlantError::StepSize { dt, max: self.cfg.control_period });
        }
        if let Some(c) = command {
            self.apply(c)?;
        }
        let end = self.t + secs_to_ns(dt);
        self.integrate_to(end);
        Ok(())
    }

    /// Integrate to absolute time `t`, in steps no longer than the control
    /// period. No-op if `t` is not in the future.
    pub fn advance_to(&mut self, t: TimestampNs) {
        let max_ns = secs_to_ns(self.cfg.control_period).max(1);
        while self.t < t {
            let next = TimestampNs((self.t.0 + max_ns).min(t.0));
            self.integrate_to(next);
        }
    }

    /// Exact over piecewise-constant setpoints: splits at every due-time.
    fn integrate_to(&mut self, end: TimestampNs) {
        self.steer.release(self.t);
        self.speed.release(self.t);
        while self.t < end {
            let mut next = end;
            for due in [self.steer.next_due(), self.speed.next_due()].into_iter().flatten() {
                if due > self.t && due < next {
                    next = due;
                }
            }
            self.integrate_segment(next);
            self.steer.release(self.t);
            self.speed.release(self.t);
        }
    }

    fn integrate_segment(&mut self, to: TimestampNs) {
        let dt = (to.0 - self.t.0) as f64 * 1e-9;
        let v0 = self.speed.actual;
        let d0 = self.steer.actual;
        self.speed.relax(dt);
        self.steer.relax(dt);
        let v = 0.5 * (v0 + self.speed.actual);
        let delta = 0.5 * (d0 + self.steer.actual);
        let omega = v / self.cfg.wheelbase * delta.tan();
        let th = self.pose.heading;
        let p = self.pose.position;
        let (dx, dy) = if (omega * dt).abs() > 1e-9 {
            let th1 = th + omega * dt;
            (v / omega * (th1.sin() - th.sin()), -v / omega * (th1.cos() - th.cos()))
        } else {
            (v * dt * th.cos(), v * dt * th.sin())
        };
        self.pose = TrajectorySample {
            t: to,
            position: Vec2::new(p.x + dx, p.y + dy),
            heading: wrap_angle(th + omega * dt),
        };
        self.t = to;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at_rest(cfg: PlantConfig) -> Plant {
        Plant::new(cfg, TrajectorySample::new(TimestampNs(0), Vec2::ZERO, 0.0), 1).unwrap()
    }

    #[test]
    fn derived_time_constants() {
        let cfg = PlantConfig::calibrated();
        assert!((cfg.steering.tau_p - 0.3660).abs() < 5e-5);
        assert!((cfg.velocity.tau_p - 0.2199).abs() < 5e-5);
        assert!((cfg.steering.t90() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn command_map_examples() {
        let id = CommandMap::identity(2.0);
        assert_eq!(id.map(0.5), (0.5, false));
        let scaled = CommandMap::scaled(2.0, 2.11);
        let (sp, clamped) = scaled.map(1.0);
        assert!((sp - 2.11).abs() < 1e-12 && !clamped);
        assert_eq!(scaled.map(3.0), (4.22, true));
        assert_eq!(scaled.map(-9.0), (-4.22, true));
        let kinked = CommandMap { points: vec![(0.0, 0.0), (1.0, 0.5), (2.0, 2.0)] };
        assert_eq!(kinked.map(1.5), (1.25, false));
        assert!(CommandMap { points: vec![(0.0, 1.0), (1.0, 0.0)] }.validate("x").is_err());
    }

    #[test]
    fn zero_command_keeps_pose() {
        let mut p = at_rest(PlantConfig::calibrated());
        for _ in 0..100 {
            p.step(Some(RawCommand { speed: 0.0, steer: 0.0 }), 0.005).unwrap();
        }
        assert_eq!(p.pose().position, Vec2::ZERO);
        assert_eq!(p.pose().heading, 0.0);
    }

    #[test]
    fn uncalibrated_velocity_gain_steady_state() {
        let cfg = PlantConfig::paper_uncalibrated();
        let settle = cfg.velocity.dead_time + 10.0 * cfg.velocity.tau_p;
        let mut p = at_rest(cfg);
        p.apply(RawCommand { speed: 1.0, steer: 0.0 }).unwrap();
        p.advance_to(TimestampNs::from_secs_f64(settle + 0.005));
        assert!((p.v_actual() - 2.11).abs() < 1e-4, "{}", p.v_actual());
    }

    #[test]
    fn steering_step_crosses_90_percent_at_t90() {
        let cfg = PlantConfig::calibrated();
        let cp = cfg.control_period;
        let mut p = at_rest(cfg);
        p.apply(RawCommand { speed: 0.0, steer: 0.2 }).unwrap();
        let mut t = 0.0;
        while p.steer_actual() < 0.9 * 0.2 {
            p.step(None, cp).unwrap();
            t += cp;
        }
        assert!((t - 0.85).abs() <= cp, "crossed at {t}");
    }

    #[test]
    fn dead_time_is_independent_of_step_size() {
        let cfg = PlantConfig::calibrated();
        let l = cfg.velocity.dead_time;
        let mut coarse = at_rest(cfg.clone());
        let mut fine = at_rest(cfg);
        coarse.apply(RawCommand { speed: 1.0, steer: 0.1 }).unwrap();
        fine.apply(RawCommand { speed: 1.0, steer: 0.1 }).unwrap();
        let dt = 0.004;
        while coarse.time().as_secs_f64() + dt <= l {
            coarse.step(None, dt).unwrap();
            fine.step(None, dt / 2.0).unwrap();
            fine.step(None, dt / 2.0).unwrap();
            assert_eq!(coarse.v_actual().to_bits(), fine.v_actual().to_bits());
            assert_eq!(coarse.v_actual(), 0.0);
        }
        for _ in 0..200 {
            coarse.step(None, dt).unwrap();
            fine.step(None, dt / 2.0).unwrap();
            fine.step(None, dt / 2.0).unwrap();
            assert!((coarse.v_actual() - fine.v_actual()).abs() < 1e-12);
        }
    }

    #[test]
    fn steady_state_gain_and_t90_for_seeded_params() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let k: f64 = rng.random_range(0.2..2.5);
            let tau: f64 = rng.random_range(0.05..0.6);
            let l: f64 = rng.random_range(0.0..0.1);
            let mut cfg = PlantConfig::calibrated();
            cfg.velocity = FopdtParams { gain: k, tau_p: tau, dead_time: l };
            let cp = cfg.control_period;
            let mut p = at_rest(cfg);
            p.apply(RawCommand { speed: 0.5, steer: 0.0 }).unwrap();
            let target = 0.5 * k;
            let mut crossed = None;
            let mut t = 0.0;
            while t < l + 20.0 * tau {
                p.step(None, cp).unwrap();
                t += cp;
                if crossed.is_none() && p.v_actual() >= 0.9 * target {
                    crossed = Some(t);
                }
            }
            assert!((p.v_actual() / 0.5 - k).abs() < 1e-6 * k.max(1.0));
            let t90 = l + tau * LN_10;
            assert!((crossed.unwrap() - t90).abs() <= cp, "k {k} tau {tau} l {l}");
        }
    }

    #[test]
    fn limits_hold() {
        let cfg = PlantConfig::calibrated();
        let max_steer = cfg.max_steer;
        let mut p = at_rest(cfg);
        let applied = p.apply(RawCommand { speed: 10.0, steer: 3.0 }).unwrap();
        assert!(applied.clamped);
        p.advance_to(TimestampNs::from_secs_f64(5.0));
        assert!(p.steer_actual().abs() <= max_steer);
        assert!(p.v_actual() <= 2.0 + 1e-12);
        assert!(p.apply(RawCommand { speed: f64::NAN, steer: 0.0 }).is_err());
        assert!(p.step(None, 0.5).is_err());
        assert!(p.step(None, 0.0).is_err());
    }

    #[test]
    fn kinematic_circle() {
        // constant steer: closed circle of radius wheelbase / tan(delta)
        let mut cfg = PlantConfig::calibrated();
        cfg.steering.dead_time = 0.0;
        cfg.velocity.dead_time = 0.0;
        cfg.steering.tau_p = 1e-6;
        cfg.velocity.tau_p = 1e-6;
        let wb = cfg.wheelbase;
        let mut p = at_rest(cfg);
        p.apply(RawCommand { speed: 0.5, steer: 0.3 }).unwrap();
        let r = wb / 0.3f64.tan();
        let period = 2.0 * std::f64::consts::PI * r / 0.5;
        p.advance_to(TimestampNs::from_secs_f64(period));
        // the first sub-step averages the lag transient, costing about half a step of travel
        assert!(p.pose().position.norm() < 2e-3, "{:?}", p.pose());
    }

    #[test]
    fn jitter_spread_matches_p95() {
        let j = DeadTimeJitter::characterized();
        assert!((7.2 * (1.6448536269514722 * j.steering_sigma).exp() - 35.2).abs() < 1e-9);
        let mut cfg = PlantConfig::paper_uncalibrated();
        cfg.dead_time_jitter = Some(j);
        let mut p = at_rest(cfg);
        let mut ls: Vec<f64> = (0..4000).map(|_| p.dead_time_ns(Channel::Velocity) as f64 * 1e-6).collect();
        let p95 = crate::stats::nearest_rank(&mut ls, 95);
        assert!((p95 - 92.3).abs() < 0.1 * 92.3, "{p95}");
    }
}
