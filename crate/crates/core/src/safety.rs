//! Interaction safety metrics: body-gap time-to-collision, minimum body
//! distance, and event extraction over a per-frame trace.
//!
//! Bodies are circumscribed circles, so gaps and TTC are conservative.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;
use crate::stats::{json_f64, json_opt_f64};
use crate::timebase::TimestampNs;

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("agent timestamps differ ({a:?} vs {b:?})")]
    TimestampMismatch { a: TimestampNs, b: TimestampNs },
    #[error("frame {index} at t={t:?} has no ego `{ego}`")]
    MissingEgo { index: usize, t: TimestampNs, ego: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: String,
    pub t: TimestampNs,
    pub position: Vec2,
    pub velocity: Vec2,
    pub footprint_radius: f64,
}

/// Distance between the two body circles, floored at zero.
pub fn body_gap(a: &AgentState, b: &AgentState) -> f64 {
    (a.position.distance(b.position) - a.footprint_radius - b.footprint_radius).max(0.0)
}

/// Time until the body circles touch under constant velocities, or `+inf`.
/// Bodies already in contact give 0.
pub fn ttc_body(ego: &AgentState, other: &AgentState) -> Result<f64, SafetyError> {
    if ego.t != other.t {
        return Err(SafetyError::TimestampMismatch { a: ego.t, b: other.t });
    }
    let dp = other.position - ego.position;
    let dv = other.velocity - ego.velocity;
    let r = ego.footprint_radius + other.footprint_radius;
    // |dp + dv s|^2 = r^2  ->  a s^2 + b s + c = 0
    let a = dv.norm_sq();
    let b = 2.0 * dp.dot(dv);
    let c = dp.norm_sq() - r * r;
    if c <= 0.0 {
        return Ok(0.0);
    }
    if a == 0.0 || b >= 0.0 {
        return Ok(f64::INFINITY);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Ok(f64::INFINITY);
    }
    // with b < 0 and c > 0 both roots are positive; c / q is the smaller
    // one and avoids cancellation
    let q = 0.5 * (-b + disc.sqrt());
    Ok(c / q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: TimestampNs,
    pub agents: Vec<AgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: TimestampNs,
    #[serde(with = "json_f64")]
    pub ttc: f64,
    pub gaps: Vec<(String, f64)>,
    #[serde(with = "json_f64")]
    pub d_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyTrace {
    pub frames: Vec<TraceFrame>,
    #[serde(with = "json_f64")]
    pub ttc_min: f64,
    pub t_at_ttc_min: Option<TimestampNs>,
    #[serde(with = "json_f64")]
    pub d_min: f64,
    pub t_at_d_min: Option<TimestampNs>,
}

/// Per-frame minimum gap and TTC over all non-ego agents, plus the global
/// minima (first occurrence on ties). Frames without other agents report
/// `+inf` for both.
pub fn d_min_trace(frames: &[Frame], ego_id: &str) -> Result<SafetyTrace, SafetyError> {
    let mut out = Vec::with_capacity(frames.len());
    let (mut ttc_min, mut t_ttc) = (f64::INFINITY, None);
    let (mut d_min, mut t_d) = (f64::INFINITY, None);
    for (index, f) in frames.iter().enumerate() {
        let ego = f.agents.iter().find(|a| a.id == ego_id).ok_or_else(|| SafetyError::MissingEgo {
            index,
            t: f.t,
            ego: ego_id.to_owned(),
        })?;
        let mut gaps = Vec::new();
        let mut ttc = f64::INFINITY;
        for other in f.agents.iter().filter(|a| a.id != ego_id) {
            gaps.push((other.id.clone(), body_gap(ego, other)));
            ttc = ttc.min(ttc_body(ego, other)?);
        }
        let d = gaps.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
        if d < d_min {
            d_min = d;
            t_d = Some(f.t);
        }
        if ttc < ttc_min {
            ttc_min = ttc;
            t_ttc = Some(f.t);
        }
        out.push(TraceFrame { t: f.t, ttc, gaps, d_min: d });
    }
    Ok(SafetyTrace { frames: out, ttc_min, t_at_ttc_min: t_ttc, d_min, t_at_d_min: t_d })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    GlobalMin,
    Valley,
    ThresholdCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "TTC")]
    Ttc,
    #[serde(rename = "Dmin")]
    Dmin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub kind: EventKind,
    pub metric: Metric,
    #[serde(rename = "t_ns")]
    pub t: TimestampNs,
    pub value: f64,
    #[serde(with = "json_opt_f64")]
    pub prominence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventConfig {
    pub ttc_threshold: f64,
    pub ttc_prominence: f64,
    pub dmin_prominence: f64,
    pub min_separation_s: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self { ttc_threshold: 1.5, ttc_prominence: 0.3, dmin_prominence: 1.0, min_separation_s: 5.0 }
    }
}

/// Prominence of the strict local minimum at `i`. On each side the
/// reference is the highest value before reaching something lower than
/// `v[i]`; running off the end of the trace counts as `+inf`.
fn prominence(v: &[f64], i: usize) -> f64 {
    let side = |iter: &mut dyn Iterator<Item = usize>| {
        let mut peak = v[i];
        for j in iter {
            if v[j] < v[i] {
                return peak;
            }
            peak = peak.max(v[j]);
        }
        f64::INFINITY
    };
    let left = side(&mut (0..i).rev());
    let right = side(&mut (i + 1..v.len()));
    left.min(right) - v[i]
}

fn valleys(t: &[TimestampNs], v: &[f64], metric: Metric, min_prominence: f64, min_sep_ns: f64) -> Vec<SafetyEvent> {
    let mut cands: Vec<SafetyEvent> = (1..v.len().saturating_sub(1))
        .filter(|&i| v[i].is_finite() && v[i] < v[i - 1] && v[i] < v[i + 1])
        .filter_map(|i| {
            let p = prominence(v, i);
            (p >= min_prominence).then_some(SafetyEvent { kind: EventKind::Valley, metric, t: t[i], value: v[i], prominence: Some(p) })
        })
        .collect();
    cands.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.t.cmp(&b.t)));
    let mut kept: Vec<SafetyEvent> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| ((c.t - k.t) as f64).abs() >= min_sep_ns) {
            kept.push(c);
        }
    }
    kept
}

/// Global minima, threshold crossings and prominent valleys of a trace.
///
/// Output order: global minima (TTC then D_min), threshold crossings in time
/// order, TTC valleys, D_min valleys; valleys ascending by value.
pub fn extract_events(trace: &SafetyTrace, cfg: &EventConfig) -> Vec<SafetyEvent> {
    let mut out = Vec::new();
    if let Some(t) = trace.t_at_ttc_min.filter(|_| trace.ttc_min.is_finite()) {
        out.push(SafetyEvent { kind: EventKind::GlobalMin, metric: Metric::Ttc, t, value: trace.ttc_min, prominence: None });
    }
    if let Some(t) = trace.t_at_d_min.filter(|_| trace.d_min.is_finite()) {
        out.push(SafetyEvent { kind: EventKind::GlobalMin, metric: Metric::Dmin, t, value: trace.d_min, prominence: None });
    }
    let f = &trace.frames;
    for (i, fr) in f.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &f[j]);
        if fr.ttc < cfg.ttc_threshold && prev.is_none_or(|p| p.ttc >= cfg.ttc_threshold) {
            out.push(SafetyEvent { kind: EventKind::ThresholdCross, metric: Metric::Ttc, t: fr.t, value: fr.ttc, prominence: None });
        }
        if fr.d_min == 0.0 && prev.is_none_or(|p| p.d_min > 0.0) {
            out.push(SafetyEvent { kind: EventKind::ThresholdCross, metric: Metric::Dmin, t: fr.t, value: 0.0, prominence: None });
        }
    }
    let ts: Vec<TimestampNs> = f.iter().map(|x| x.t).collect();
    let sep = cfg.min_separation_s * 1e9;
    let ttc: Vec<f64> = f.iter().map(|x| x.ttc).collect();
    let dmin: Vec<f64> = f.iter().map(|x| x.d_min).collect();
    out.extend(valleys(&ts, &ttc, Metric::Ttc, cfg.ttc_prominence, sep));
    out.extend(valleys(&ts, &dmin, Metric::Dmin, cfg.dmin_prominence, sep));
    out
}

/// CSV `t_ns,ttc_s,dmin_m`; unbounded values are written as `inf`.
pub fn write_trace_csv<W: Write>(w: W, trace: &SafetyTrace) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t_ns", "ttc_s", "dmin_m"])?;
    for f in &trace.frames {
        wtr.write_record([f.t.0.to_string(), f.ttc.to_string(), f.d_min.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: &str, p: (f64, f64), v: (f64, f64), r: f64) -> AgentState {
        AgentState { id: id.into(), t: TimestampNs(0), position: Vec2::new(p.0, p.1), velocity: Vec2::new(v.0, v.1), footprint_radius: r }
    }

    #[test]
    fn head_on() {
        let a = agent("ego", (0.0, 0.0), (2.5, 0.0), 1.0);
        let b = agent("npc", (12.0, 0.0), (-2.5, 0.0), 1.0);
        assert!((ttc_body(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!((body_gap(&a, &b) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn diverging_parallel_and_overlap() {
        let a = agent("ego", (0.0, 0.0), (-1.0, 0.0), 0.5);
        let b = agent("npc", (5.0, 0.0), (1.0, 0.0), 0.5);
        assert_eq!(ttc_body(&a, &b).unwrap(), f64::INFINITY);
        let c = agent("npc", (5.0, 0.0), (-1.0, 0.0), 0.5);
        assert_eq!(ttc_body(&a, &c).unwrap(), f64::INFINITY);
        let d = agent("npc", (0.5, 0.0), (0.0, 0.0), 0.5);
        assert_eq!(ttc_body(&a, &d).unwrap(), 0.0);
        // passes beside without touching
        let e = agent("npc", (5.0, 3.0), (-2.0, 0.0), 0.5);
        assert_eq!(ttc_body(&agent("ego", (0.0, 0.0), (0.0, 0.0), 0.5), &e).unwrap(), f64::INFINITY);
        let mut f = b.clone();
        f.t = TimestampNs(1);
        assert!(ttc_body(&a, &f).is_err());
    }

    #[test]
    fn static_npc_dmin() {
        let frames: Vec<Frame> = (0..10)
            .map(|i| Frame {
                t: TimestampNs(i * 100),
                agents: vec![agent("ego", (0.0, 0.0), (0.0, 0.0), 0.5), agent("npc", (6.55, 0.0), (0.0, 0.0), 1.0)],
            })
            .collect();
        let tr = d_min_trace(&frames, "ego").unwrap();
        assert!((tr.d_min - 5.05).abs() < 1e-12);
        assert_eq!(tr.t_at_d_min, Some(TimestampNs(0)));
        let alone = vec![Frame { t: TimestampNs(0), agents: vec![agent("ego", (0.0, 0.0), (0.0, 0.0), 0.5)] }];
        let tr = d_min_trace(&alone, "ego").unwrap();
        assert_eq!(tr.d_min, f64::INFINITY);
        assert!(tr.frames[0].gaps.is_empty());
        let err = d_min_trace(&alone, "other").unwrap_err();
        assert!(matches!(err, SafetyError::MissingEgo { index: 0, .. }));
    }

    fn synthetic_trace(ttc: &[f64], dmin: &[f64], dt_ns: u64) -> SafetyTrace {
        let frames: Vec<TraceFrame> = ttc
            .iter()
            .zip(dmin)
            .enumerate()
            .map(|(i, (&a, &b))| TraceFrame { t: TimestampNs(i as u64 * dt_ns), ttc: a, gaps: vec![], d_min: b })
            .collect();
        let argmin = |v: &[f64]| {
            let mut best = (f64::INFINITY, None);
            for (i, &x) in v.iter().enumerate() {
                if x < best.0 {
                    best = (x, Some(TimestampNs(i as u64 * dt_ns)));
                }
            }
            best
        };
        let (tm, tt) = argmin(ttc);
        let (dm, dt) = argmin(dmin);
        SafetyTrace { frames, ttc_min: tm, t_at_ttc_min: tt, d_min: dm, t_at_d_min: dt }
    }

    #[test]
    fn monotone_trace_has_no_valleys() {
        let d: Vec<f64> = (0..50).map(|i| 50.0 - i as f64).collect();
        let tr = synthetic_trace(&vec![f64::INFINITY; 50], &d, 1_000_000_000);
        let ev = extract_events(&tr, &EventConfig::default());
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].kind, ev[0].metric, ev[0].t), (EventKind::GlobalMin, Metric::Dmin, TimestampNs(49_000_000_000)));
    }

    #[test]
    fn two_dips_ordered_by_depth() {
        // baseline 10 m with dips to 7 m and 9 m (depths 3 and 1), 20 s apart
        let d: Vec<f64> = (0..60)
            .map(|i| {
                let t = i as f64;
                10.0 - 3.0 * (-(t - 15.0).powi(2) / 8.0).exp() - 1.2 * (-(t - 40.0).powi(2) / 8.0).exp()
            })
            .collect();
        let tr = synthetic_trace(&vec![f64::INFINITY; 60], &d, 1_000_000_000);
        let ev = extract_events(&tr, &EventConfig::default());
        let v: Vec<&SafetyEvent> = ev.iter().filter(|e| e.kind == EventKind::Valley).collect();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].t, TimestampNs(15_000_000_000));
        assert_eq!(v[1].t, TimestampNs(40_000_000_000));
        assert!((v[0].value - 7.0).abs() < 1e-12);
        // the shallow dip's reference is the plateau between the dips
        assert!((v[1].prominence.unwrap() - (d[27] - d[40])).abs() < 0.01);
    }

    #[test]
    fn ttc_dip_crosses_once() {
        let ttc: Vec<f64> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.25;
                if t < 2.0 { f64::INFINITY } else { 1.06 + 0.4 * (t - 5.0).powi(2) }
            })
            .collect();
        let tr = synthetic_trace(&ttc, &vec![4.0; 40], 250_000_000);
        let ev = extract_events(&tr, &EventConfig::default());
        let crosses: Vec<&SafetyEvent> = ev.iter().filter(|e| e.kind == EventKind::ThresholdCross).collect();
        assert_eq!(crosses.len(), 1);
        assert_eq!(crosses[0].metric, Metric::Ttc);
        let g = ev.iter().find(|e| e.kind == EventKind::GlobalMin && e.metric == Metric::Ttc).unwrap();
        assert!((g.value - 1.06).abs() < 1e-12);
    }

    #[test]
    fn collision_emits_dmin_cross() {
        let d = [3.0, 1.0, 0.0, 0.0, 2.0, 0.0, 4.0];
        let tr = synthetic_trace(&[f64::INFINITY; 7], &d, 1_000_000);
        let ev = extract_events(&tr, &EventConfig::default());
        let n = ev.iter().filter(|e| e.kind == EventKind::ThresholdCross && e.metric == Metric::Dmin).count();
        assert_eq!(n, 2);
    }

    #[test]
    fn event_json_shape() {
        let e = SafetyEvent { kind: EventKind::Valley, metric: Metric::Ttc, t: TimestampNs(5), value: 1.2, prominence: Some(f64::INFINITY) };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(s, r#"{"kind":"Valley","metric":"TTC","t_ns":5,"value":1.2,"prominence":"inf"}"#);
        let back: SafetyEvent = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }
}
