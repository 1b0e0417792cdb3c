//! System-under-test contract and the reference pure-pursuit SUT.
//!
//! A SUT sees only [`Observation`]s and answers with setpoints. This module
//! deliberately imports nothing from the plant or link modules.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::safety::AgentState;
use crate::spatial::{ReferencePath, TrajectorySample};
use crate::timebase::{ms_to_ns, TimestampNs};

#[derive(Debug, Error, PartialEq)]
pub enum SutError {
    #[error("SUT has no route; call reset first")]
    NoRoute,
    #[error("invalid SUT parameter: {0}")]
    Params(String),
    #[error("unknown SUT `{0}`")]
    Unknown(String),
    #[error("unknown SUT latency preset `{0}`")]
    UnknownLatency(String),
    #[error("non-finite observation")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub t: TimestampNs,
    pub ego_pose: TrajectorySample,
    /// Measured ego speed (m/s), synchronized alongside the pose.
    pub ego_speed: f64,
    pub detections: Vec<AgentState>,
    pub route: Arc<ReferencePath>,
    pub goal_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoints {
    pub speed: f64,
    pub steer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub speed_setpoint: f64,
    pub steer_setpoint: f64,
    pub t_issued: TimestampNs,
}

/// A system under test.
pub trait Sut: Send {
    fn name(&self) -> &str;
    /// Clear internal state and adopt `route`.
    fn reset(&mut self, route: Arc<ReferencePath>, seed: u64) -> Result<(), SutError>;
    fn compute(&mut self, obs: &Observation) -> Result<Setpoints, SutError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurePursuitParams {
    /// Lookahead gain, seconds.
    pub k_v: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub wheelbase: f64,
    /// Yield horizon, seconds.
    pub t_h: f64,
    /// Yield if a predicted body gap falls below this, meters.
    pub d_stop: f64,
    pub ego_radius: f64,
    /// Lateral acceleration used to cap speed on commanded curvature.
    pub a_lat_max: f64,
    /// Stop this far before the end of an open route, meters.
    pub stop_margin: f64,
}

impl Default for PurePursuitParams {
    fn default() -> Self {
        Self {
            k_v: 0.5,
            l_min: 0.3,
            l_max: 1.2,
            wheelbase: 0.1,
            t_h: 2.0,
            d_stop: 0.5,
            ego_radius: 0.1,
            a_lat_max: 1.0,
            stop_margin: 0.1,
        }
    }
}

impl PurePursuitParams {
    pub fn validate(&self) -> Result<(), SutError> {
        let ok = [self.l_min, self.wheelbase, self.a_lat_max].iter().all(|v| v.is_finite() && *v > 0.0)
            && self.k_v.is_finite()
            && self.k_v >= 0.0
            && [self.t_h, self.d_stop, self.ego_radius, self.stop_margin].iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.l_max >= self.l_min;
        if ok {
            Ok(())
        } else {
            Err(SutError::Params("pure pursuit parameters must be positive with l_max >= l_min".into()))
        }
    }
}

/// Pure pursuit lateral control, curvature-limited speed and a yield rule
/// for detections ahead.
#[derive(Debug, Clone)]
pub struct PurePursuit {
    params: PurePursuitParams,
    route: Option<Arc<ReferencePath>>,
}

impl PurePursuit {
    pub fn new(params: PurePursuitParams) -> Result<Self, SutError> {
        params.validate()?;
        Ok(Self { params, route: None })
    }

    pub fn params(&self) -> &PurePursuitParams {
        &self.params
    }

    /// Smallest predicted body gap to `other` within the horizon under
    /// constant velocities.
    fn predicted_gap(&self, obs: &Observation, other: &AgentState) -> f64 {
        let ego_v = crate::geometry::Vec2::from_polar(obs.ego_speed, obs.ego_pose.heading);
        let dp = other.position - obs.ego_pose.position;
        let dv = other.velocity - ego_v;
        let s = if dv.norm_sq() > 0.0 { (-dp.dot(dv) / dv.norm_sq()).clamp(0.0, self.params.t_h) } else { 0.0 };
        (dp + dv * s).norm() - self.params.ego_radius - other.footprint_radius
    }
}

impl Sut for PurePursuit {
    fn name(&self) -> &str {
        "pure-pursuit"
    }

    fn reset(&mut self, route: Arc<ReferencePath>, _seed: u64) -> Result<(), SutError> {
        self.route = Some(route);
        Ok(())
    }

    fn compute(&mut self, obs: &Observation) -> Result<Setpoints, SutError> {
        if self.route.is_none() {
            return Err(SutError::NoRoute);
        }
        if !(obs.ego_pose.position.is_finite() && obs.ego_pose.heading.is_finite() && obs.ego_speed.is_finite()) {
            return Err(SutError::NonFinite);
        }
        let p = &self.params;
        let route = &obs.route;
        let pose = obs.ego_pose;
        let proj = route.project(pose.position);
        let ld = (p.k_v * obs.ego_speed.abs()).clamp(p.l_min, p.l_max);
        let target = route.point_at(proj.arclength + ld);
        let alpha = crate::geometry::wrap_angle((target - pose.position).angle() - pose.heading);
        let steer = (2.0 * p.wheelbase * alpha.sin()).atan2(ld);

        let kappa = 2.0 * alpha.sin() / ld;
        let mut speed = obs.goal_speed;
        if kappa.abs() > 1e-9 {
            speed = speed.min((p.a_lat_max / kappa.abs()).sqrt());
        }
        if !route.is_closed() && route.total_length() - proj.arclength < p.stop_margin {
            speed = 0.0;
        }
        let fwd = crate::geometry::Vec2::from_polar(1.0, pose.heading);
        let blocked = obs
            .detections
            .iter()
            .filter(|d| (d.position - pose.position).dot(fwd) > 0.0)
            .any(|d| self.predicted_gap(obs, d) < p.d_stop);
        if blocked {
            speed = 0.0;
        }
        Ok(Setpoints { speed, steer })
    }
}

/// One component of a Gaussian mixture, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub weight: f64,
}

/// Processing latency of the SUT. Negative draws are clamped to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SutLatencyModel {
    Constant { value_ms: f64 },
    Bimodal { components: [MixtureComponent; 2] },
}

impl SutLatencyModel {
    pub fn preset(name: &str) -> Result<Self, SutError> {
        match name {
            "constant-15.48" => Ok(Self::Constant { value_ms: 15.48 }),
            "bimodal" => Ok(Self::Bimodal {
                components: [
                    MixtureComponent { mean_ms: 10.0, std_ms: 2.0, weight: 0.6 },
                    MixtureComponent { mean_ms: 28.0, std_ms: 4.0, weight: 0.4 },
                ],
            }),
            other => Err(SutError::UnknownLatency(other.to_owned())),
        }
    }

    pub fn validate(&self) -> Result<(), SutError> {
        match self {
            Self::Constant { value_ms } if value_ms.is_finite() && *value_ms >= 0.0 => Ok(()),
            Self::Constant { .. } => Err(SutError::Params("constant latency must be >= 0".into())),
            Self::Bimodal { components } => {
                let wsum: f64 = components.iter().map(|c| c.weight).sum();
                let ok = components.iter().all(|c| c.mean_ms.is_finite() && c.std_ms >= 0.0 && c.weight >= 0.0);
                if ok && (wsum - 1.0).abs() < 1e-9 {
                    Ok(())
                } else {
                    Err(SutError::Params("bimodal weights must be >= 0 and sum to 1".into()))
                }
            }
        }
    }

    pub fn sample_ms(&self, rng: &mut impl Rng) -> f64 {
        match self {
            Self::Constant { value_ms } => *value_ms,
            Self::Bimodal { components } => {
                let u: f64 = rng.random();
                let c = if u < components[0].weight { components[0] } else { components[1] };
                let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
                (c.mean_ms + c.std_ms * z).max(0.0)
            }
        }
    }
}

/// Wraps a SUT with its processing-latency model. The command becomes
/// available `latency` after the observation time; the platform schedules
/// it, nothing blocks.
pub struct SutRunner {
    sut: Box<dyn Sut>,
    latency: SutLatencyModel,
    rng: RngStream,
}

impl SutRunner {
    pub fn new(sut: Box<dyn Sut>, latency: SutLatencyModel, seed: u64) -> Result<Self, SutError> {
        latency.validate()?;
        Ok(Self { sut, latency, rng: RngStream::new(seed, "sut.lat") })
    }

    pub fn reset(&mut self, route: Arc<ReferencePath>, seed: u64) -> Result<(), SutError> {
        self.rng = RngStream::new(seed, "sut.lat");
        self.sut.reset(route, seed)
    }

    pub fn step(&mut self, obs: &Observation) -> Result<ControlCommand, SutError> {
        let sp = self.sut.compute(obs)?;
        let lat = ms_to_ns(self.latency.sample_ms(&mut self.rng));
        Ok(ControlCommand { speed_setpoint: sp.speed, steer_setpoint: sp.steer, t_issued: obs.t + lat })
    }

    pub fn name(&self) -> &str {
        self.sut.name()
    }
}

/// Construct a registered SUT by name.
pub fn sut_by_name(name: &str, params: PurePursuitParams) -> Result<Box<dyn Sut>, SutError> {
    match name {
        "pure-pursuit" => Ok(Box::new(PurePursuit::new(params)?)),
        other => Err(SutError::Unknown(other.to_owned())),
    }
}
