//! Scripted virtual traffic for Stage 3.
//!
//! NPCs stay dormant until the ego first enters the trigger zone. After that
//! each one follows its open route with a trapezoidal speed profile and
//! despawns at the end; with `repeat_period_s` it respawns on that period.
//! NPC state is a closed-form function of time, so it never drifts with the
//! scheduler's step pattern.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::spatial::{PathDoc, ReferencePath};
use crate::timebase::TimestampNs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedProfile {
    pub cruise_mps: f64,
    pub accel_mps2: f64,
    pub decel_mps2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpcSpec {
    pub id: String,
    pub route: PathDoc,
    pub footprint_radius: f64,
    pub profile: SpeedProfile,
    /// Delay after activation before the NPC spawns.
    #[serde(default)]
    pub start_delay_s: f64,
    #[serde(default)]
    pub repeat_period_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub trigger_zone: Aabb,
    pub npcs: Vec<NpcSpec>,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), String> {
        let z = &self.trigger_zone;
        if !(z.min.is_finite() && z.max.is_finite() && z.min.x < z.max.x && z.min.y < z.max.y) {
            return Err("trigger zone must have min < max".into());
        }
        if self.npcs.is_empty() {
            return Err("scenario needs at least one NPC".into());
        }
        for (i, n) in self.npcs.iter().enumerate() {
            let p = &n.profile;
            let pos = |v: f64| v.is_finite() && v > 0.0;
            if !(pos(p.cruise_mps) && pos(p.accel_mps2) && pos(p.decel_mps2) && pos(n.footprint_radius)) {
                return Err(format!("npcs[{i}]: speeds, rates and radius must be > 0"));
            }
            if !(n.start_delay_s.is_finite() && n.start_delay_s >= 0.0) {
                return Err(format!("npcs[{i}]: start_delay_s must be >= 0"));
            }
            if n.repeat_period_s.is_some_and(|p| !pos(p)) {
                return Err(format!("npcs[{i}]: repeat_period_s must be > 0"));
            }
            if n.route.closed {
                return Err(format!("npcs[{i}]: NPC routes must be open"));
            }
            ReferencePath::try_from(n.route.clone()).map_err(|e| format!("npcs[{i}].route: {e}"))?;
        }
        Ok(())
    }
}

/// Distance/speed plan along a route of fixed length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    accel: f64,
    decel: f64,
    v_peak: f64,
    t_accel: f64,
    t_cruise: f64,
    t_decel: f64,
    length: f64,
}

impl Motion {
    pub fn plan(profile: &SpeedProfile, length: f64) -> Self {
        let (a, d) = (profile.accel_mps2, profile.decel_mps2);
        let mut v = profile.cruise_mps;
        let ramps = v * v / (2.0 * a) + v * v / (2.0 * d);
        if ramps > length {
            // triangular profile: never reaches cruise
            v = (2.0 * length * a * d / (a + d)).sqrt();
        }
        let t_accel = v / a;
        let t_decel = v / d;
        let cruise_len = (length - v * v / (2.0 * a) - v * v / (2.0 * d)).max(0.0);
        Self { accel: a, decel: d, v_peak: v, t_accel, t_cruise: cruise_len / v, t_decel, length }
    }

    pub fn duration(&self) -> f64 {
        self.t_accel + self.t_cruise + self.t_decel
    }

    /// Arc length and speed `tau` seconds after spawn.
    pub fn at(&self, tau: f64) -> (f64, f64) {
        let tau = tau.clamp(0.0, self.duration());
        if tau < self.t_accel {
            (0.5 * self.accel * tau * tau, self.accel * tau)
        } else if tau < self.t_accel + self.t_cruise {
            let u = tau - self.t_accel;
            (0.5 * self.v_peak * self.t_accel + self.v_peak * u, self.v_peak)
        } else {
            let r = self.duration() - tau;
            (self.length - 0.5 * self.decel * r * r, self.decel * r)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpcState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct NpcWorld {
    script: ScenarioScript,
    routes: Vec<(ReferencePath, Motion)>,
    activated_at: Option<TimestampNs>,
}

impl NpcWorld {
    pub fn new(script: ScenarioScript) -> Result<Self, String> {
        script.validate()?;
        let routes = script
            .npcs
            .iter()
            .map(|n| {
                let path = ReferencePath::try_from(n.route.clone()).expect("validated");
                let motion = Motion::plan(&n.profile, path.total_length());
                (path, motion)
            })
            .collect();
        Ok(Self { script, routes, activated_at: None })
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn activated_at(&self) -> Option<TimestampNs> {
        self.activated_at
    }

    /// Feed an ego position sample; the first one inside the zone activates.
    pub fn observe_ego(&mut self, t: TimestampNs, p: Vec2) {
        if self.activated_at.is_none() && self.script.trigger_zone.contains(p) {
            self.activated_at = Some(t);
        }
    }

    /// State of every NPC at `t`, `None` while not spawned.
    pub fn states(&self, t: TimestampNs) -> Vec<Option<NpcState>> {
        let Some(t0) = self.activated_at else {
            return vec![None; self.routes.len()];
        };
        let since = (t.0 - t0.0) as f64 * 1e-9;
        self.script
            .npcs
            .iter()
            .zip(&self.routes)
            .map(|(npc, (path, motion))| {
                let mut tau = since - npc.start_delay_s;
                if tau < 0.0 {
                    return None;
                }
                if let Some(period) = npc.repeat_period_s {
                    tau = tau.rem_euclid(period);
                }
                if tau > motion.duration() {
                    return None;
                }
                let (s, v) = motion.at(tau);
                Some(NpcState {
                    position: path.point_at(s),
                    velocity: Vec2::from_polar(v, path.heading_at(s)),
                    radius: npc.footprint_radius,
                })
            })
            .collect()
    }
}

/// Built-in traffic around the square circuit: four cross-traffic NPCs and
/// one oncoming NPC in the adjacent lane.
pub fn builtin_scenario(name: &str) -> Option<ScenarioScript> {
    if name != "square-crossings" {
        return None;
    }
    let v = Vec2::new;
    let npc = |id: &str, pts: Vec<Vec2>, r: f64, cruise: f64, delay: f64, period: f64| NpcSpec {
        id: id.into(),
        route: PathDoc { closed: false, vertices: pts },
        footprint_radius: r,
        profile: SpeedProfile { cruise_mps: cruise, accel_mps2: 0.4, decel_mps2: 0.5 },
        start_delay_s: delay,
        repeat_period_s: Some(period),
    };
    Some(ScenarioScript {
        trigger_zone: Aabb { min: v(1.0, 0.3), max: v(1.6, 0.9) },
        npcs: vec![
            npc("crossing-south", vec![v(2.6, -0.6), v(2.6, 1.8)], 0.12, 0.45, 1.0, 24.0),
            npc("crossing-east", vec![v(4.8, 2.2), v(2.4, 2.2)], 0.2, 0.3, 6.0, 24.0),
            npc("crossing-north", vec![v(1.8, 4.8), v(1.8, 2.4)], 0.08, 0.5, 12.5, 24.0),
            npc("crossing-west", vec![v(-0.6, 1.6), v(1.8, 1.6)], 0.25, 0.35, 18.5, 24.0),
            npc("oncoming", vec![v(3.4, 1.0), v(0.8, 1.0)], 0.1, 0.3, 3.0, 30.0),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(v: f64) -> SpeedProfile {
        SpeedProfile { cruise_mps: v, accel_mps2: 0.4, decel_mps2: 0.5 }
    }

    #[test]
    fn trapezoid_covers_route_and_is_continuous() {
        for (v, len) in [(0.4, 3.0), (2.0, 1.0), (0.3, 0.05)] {
            let m = Motion::plan(&profile(v), len);
            let (s_end, v_end) = m.at(m.duration());
            assert!((s_end - len).abs() < 1e-12, "{s_end} vs {len}");
            assert!(v_end.abs() < 1e-12);
            assert!(m.v_peak <= v + 1e-12);
            let mut prev = m.at(0.0);
            let n = 2000;
            for k in 1..=n {
                let cur = m.at(m.duration() * k as f64 / n as f64);
                assert!(cur.0 >= prev.0 - 1e-12);
                let dt = m.duration() / n as f64;
                assert!((cur.1 - prev.1).abs() <= 0.5 * dt + 1e-9, "speed jump");
                prev = cur;
            }
        }
    }

    #[test]
    fn triangular_profile_when_route_is_short() {
        let m = Motion::plan(&profile(2.0), 1.0);
        assert_eq!(m.t_cruise, 0.0);
        // peak from v^2/2a + v^2/2d = L
        let v = m.v_peak;
        assert!((v * v / 0.8 + v * v / 1.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dormant_until_trigger_then_scripted() {
        let script = builtin_scenario("square-crossings").unwrap();
        let mut w = NpcWorld::new(script.clone()).unwrap();
        assert!(w.states(TimestampNs::from_secs_f64(50.0)).iter().all(Option::is_none));
        w.observe_ego(TimestampNs::from_secs_f64(1.0), Vec2::new(0.0, 0.0));
        assert_eq!(w.activated_at(), None);
        let t0 = TimestampNs::from_secs_f64(2.0);
        w.observe_ego(t0, Vec2::new(1.2, 0.6));
        assert_eq!(w.activated_at(), Some(t0));
        // first NPC spawns at its route start after its delay
        let delay = script.npcs[0].start_delay_s;
        let before = w.states(TimestampNs::from_secs_f64(2.0 + delay - 0.01));
        assert!(before[0].is_none());
        let at = w.states(TimestampNs::from_secs_f64(2.0 + delay))[0].unwrap();
        assert_eq!(at.position, script.npcs[0].route.vertices[0]);
        assert_eq!(at.velocity, Vec2::ZERO);
        // later observations do not move the activation time
        w.observe_ego(TimestampNs::from_secs_f64(9.0), Vec2::new(1.2, 0.6));
        assert_eq!(w.activated_at(), Some(t0));
    }

    #[test]
    fn repeat_period_respawns() {
        let script = builtin_scenario("square-crossings").unwrap();
        let npc = &script.npcs[0];
        let period = npc.repeat_period_s.unwrap();
        let mut w = NpcWorld::new(script.clone()).unwrap();
        w.observe_ego(TimestampNs::ZERO, Vec2::new(1.2, 0.6));
        let t = npc.start_delay_s + 1.7;
        let a = w.states(TimestampNs::from_secs_f64(t))[0].unwrap();
        let b = w.states(TimestampNs::from_secs_f64(t + period))[0].unwrap();
        assert!(a.position.distance(b.position) < 1e-9);
    }

    #[test]
    fn validation_rejects_bad_scripts() {
        let good = builtin_scenario("square-crossings").unwrap();
        let mut s = good.clone();
        s.npcs.clear();
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.npcs[1].profile.accel_mps2 = 0.0;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.npcs[2].route.closed = true;
        assert!(s.validate().is_err());
        let mut s = good;
        s.trigger_zone.max = s.trigger_zone.min;
        assert!(s.validate().is_err());
    }
}
