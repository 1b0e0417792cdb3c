//! Stage reports. The live run and replay collect the same inputs by
//! different routes (engine state vs. audit log) and share the arithmetic
//! below, so a replayed report must match the live one bit for bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::{ResolvedConfig, Termination};
use super::OrchestratorError;
use crate::audit::{AuditError, AuditLog, Stage, TimedEvent};
use crate::geometry::Vec2;
use crate::safety::{d_min_trace, extract_events, AgentState, Frame, SafetyEvent, SafetyTrace};
use crate::spatial::{ProgressTracker, ReferencePath, TrajectoryRow, TrajectorySample};
use crate::stats::{json_f64, MetricSummary};
use crate::temporal::{aggregate_all, assemble_all, check_completeness, CompletenessReport, LatencyRecord, LatencyStats};
use crate::timebase::{ms_to_ns, secs_to_ns, CorrelationId, TimestampNs};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EGO_ID: &str = "ego";

/// One NPC as seen in a ground-truth sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpcObs {
    pub index: usize,
    pub position: Vec2,
    pub velocity: Vec2,
    pub radius: f64,
}

/// Ground-truth sample of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct GtsRecord {
    pub cid: CorrelationId,
    pub t: TimestampNs,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub npcs: Vec<NpcObs>,
}

impl GtsRecord {
    pub fn to_event(&self, run_id: &str, npc_count: usize) -> TimedEvent {
        let mut e = TimedEvent::new(run_id, self.cid, Stage::GtsSample, self.t)
            .with("x", self.position.x)
            .with("y", self.position.y)
            .with("heading", self.heading)
            .with("v", self.speed);
        for i in 0..npc_count {
            match self.npcs.iter().find(|n| n.index == i) {
                Some(n) => {
                    e = e
                        .with(&format!("npc{i}.active"), true)
                        .with(&format!("npc{i}.x"), n.position.x)
                        .with(&format!("npc{i}.y"), n.position.y)
                        .with(&format!("npc{i}.vx"), n.velocity.x)
                        .with(&format!("npc{i}.vy"), n.velocity.y)
                        .with(&format!("npc{i}.r"), n.radius);
                }
                None => e = e.with(&format!("npc{i}.active"), false),
            }
        }
        e
    }

    pub fn from_event(e: &TimedEvent, npc_count: usize) -> Result<Self, OrchestratorError> {
        let get = |k: &str| {
            e.get_f64(k).ok_or_else(|| OrchestratorError::Replay(format!("{}: GtsSample missing `{k}`", e.cid)))
        };
        let mut npcs = Vec::new();
        for i in 0..npc_count {
            if e.flag(&format!("npc{i}.active")) {
                npcs.push(NpcObs {
                    index: i,
                    position: Vec2::new(get(&format!("npc{i}.x"))?, get(&format!("npc{i}.y"))?),
                    velocity: Vec2::new(get(&format!("npc{i}.vx"))?, get(&format!("npc{i}.vy"))?),
                    radius: get(&format!("npc{i}.r"))?,
                });
            }
        }
        Ok(Self {
            cid: e.cid,
            t: e.t,
            position: Vec2::new(get("x")?, get("y")?),
            heading: get("heading")?,
            speed: get("v")?,
            npcs,
        })
    }
}

/// V2R message accounting. `sent = delivered + dropped + in_flight`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkTally {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub component: String,
    #[serde(flatten)]
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySummary {
    pub frames: usize,
    #[serde(with = "json_f64")]
    pub ttc_min: f64,
    pub t_at_ttc_min: Option<TimestampNs>,
    #[serde(with = "json_f64")]
    pub d_min: f64,
    pub t_at_d_min: Option<TimestampNs>,
    pub events: Vec<SafetyEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub schema_version: u32,
    pub stage: String,
    pub run_id: String,
    pub seed: u64,
    pub sut: String,
    pub cycles: u64,
    pub end_t_ns: TimestampNs,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    /// Set when the log had no footer; the report covers what was recorded.
    pub truncated: bool,
    pub gaps: Vec<String>,
    pub cte: Option<MetricSummary>,
    pub cte_max_m: f64,
    pub distance_m: f64,
    pub progress_m: f64,
    pub laps: f64,
    pub target_reached: bool,
    pub completed: bool,
    pub latency: Vec<ComponentStats>,
    pub completeness: CompletenessReport,
    pub incomplete_cycles: Vec<CorrelationId>,
    pub link: LinkTally,
    pub clamped_commands: u64,
    pub safety: Option<SafetySummary>,
    pub files: Vec<String>,
}

impl StageReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a report is computed from.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub cfg: &'a ResolvedConfig,
    pub stage: &'a str,
    pub run_id: &'a str,
    pub gts: &'a [GtsRecord],
    /// Complete cycles, ascending correlation ID.
    pub records: &'a [LatencyRecord],
    pub incomplete: &'a [CorrelationId],
    pub tally: LinkTally,
    pub clamped: u64,
    pub cycles: u64,
    pub end_t: TimestampNs,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub truncated: bool,
    pub gaps: Vec<String>,
}

/// Arc length the ego must cover for the lap target.
pub fn target_progress(cfg: &ResolvedConfig, route: &ReferencePath) -> Option<f64> {
    match cfg.termination {
        Termination::Duration { .. } => None,
        Termination::Laps { laps, .. } if route.is_closed() => Some(laps * route.total_length()),
        // open routes: arrive within the stop margin plus a small tolerance
        Termination::Laps { laps, .. } => {
            Some(laps.min(1.0) * (route.total_length() - cfg.sut.params.stop_margin - 0.05).max(0.0))
        }
    }
}

pub fn artifact_names(cfg: &ResolvedConfig) -> Vec<String> {
    let mut v = vec!["audit.ndjson", "report.json", "trajectory.csv", "latency.csv"];
    if cfg.scenario.is_some() {
        v.extend(["safety.csv", "events.json"]);
    }
    v.into_iter().map(String::from).collect()
}

pub fn trajectory_rows(cfg: &ResolvedConfig, route: &ReferencePath, gts: &[GtsRecord]) -> Vec<TrajectoryRow> {
    let start = Vec2::new(cfg.start.x, cfg.start.y);
    let s0 = route.project(start).arclength;
    gts.iter()
        .map(|g| {
            let s_d = route.normalize_arclength(s0 + cfg.sut.goal_speed * g.t.as_secs_f64());
            TrajectoryRow {
                sample: TrajectorySample::new(g.t, g.position, g.heading),
                cte: route.cte(g.position),
                ate: route.ate(g.position, s_d).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

pub fn safety_frames(cfg: &ResolvedConfig, gts: &[GtsRecord]) -> Vec<Frame> {
    let ids: Vec<&str> = cfg.scenario.as_ref().map(|s| s.npcs.iter().map(|n| n.id.as_str()).collect()).unwrap_or_default();
    gts.iter()
        .map(|g| {
            let mut agents = vec![AgentState {
                id: EGO_ID.into(),
                t: g.t,
                position: g.position,
                velocity: Vec2::from_polar(g.speed, g.heading),
                footprint_radius: cfg.sut.params.ego_radius,
            }];
            agents.extend(g.npcs.iter().map(|n| AgentState {
                id: ids.get(n.index).map(|s| s.to_string()).unwrap_or_else(|| format!("npc{}", n.index)),
                t: g.t,
                position: n.position,
                velocity: n.velocity,
                footprint_radius: n.radius,
            }));
            Frame { t: g.t, agents }
        })
        .collect()
}

pub fn safety_trace(cfg: &ResolvedConfig, gts: &[GtsRecord]) -> Result<SafetyTrace, OrchestratorError> {
    d_min_trace(&safety_frames(cfg, gts), EGO_ID).map_err(|e| OrchestratorError::Replay(e.to_string()))
}

pub fn compute_report(inp: &ReportInputs<'_>) -> Result<StageReport, OrchestratorError> {
    let cfg = inp.cfg;
    let route = cfg.route();
    let ctes: Vec<f64> = inp.gts.iter().map(|g| route.cte(g.position)).collect();
    let cte = MetricSummary::from_values(&ctes).ok();
    let cte_max = ctes.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut distance = 0.0;
    let mut tracker = ProgressTracker::new();
    for (k, g) in inp.gts.iter().enumerate() {
        if k > 0 {
            distance += inp.gts[k - 1].position.distance(g.position);
        }
        tracker.update(&route, g.position);
    }
    let progress = tracker.progress();
    let target_reached = !inp.aborted
        && match target_progress(cfg, &route) {
            Some(target) => progress >= target,
            None => {
                let period = ms_to_ns(cfg.r2v.sample_period_ms);
                !inp.truncated && inp.gts.last().is_some_and(|g| g.t.0 + period >= secs_to_ns(cfg.termination.horizon_s()))
            }
        };
    let completed = target_reached && cte_max <= cfg.departure_limit_m;
    let safety = if cfg.scenario.is_some() {
        let trace = safety_trace(cfg, inp.gts)?;
        let events = extract_events(&trace, &cfg.events);
        Some(SafetySummary {
            frames: trace.frames.len(),
            ttc_min: trace.ttc_min,
            t_at_ttc_min: trace.t_at_ttc_min,
            d_min: trace.d_min,
            t_at_d_min: trace.t_at_d_min,
            events,
        })
    } else {
        None
    };
    Ok(StageReport {
        schema_version: REPORT_SCHEMA_VERSION,
        stage: inp.stage.to_owned(),
        run_id: inp.run_id.to_owned(),
        seed: cfg.seed,
        sut: cfg.sut.name.clone(),
        cycles: inp.cycles,
        end_t_ns: inp.end_t,
        aborted: inp.aborted,
        abort_reason: inp.abort_reason.clone(),
        truncated: inp.truncated,
        gaps: inp.gaps.clone(),
        cte,
        cte_max_m: cte_max,
        distance_m: distance,
        progress_m: progress,
        laps: progress / route.total_length(),
        target_reached,
        completed,
        latency: aggregate_all(inp.records)
            .into_iter()
            .map(|(c, stats)| ComponentStats { component: c.name().into(), stats })
            .collect(),
        completeness: check_completeness(inp.records),
        incomplete_cycles: inp.incomplete.to_vec(),
        link: inp.tally,
        clamped_commands: inp.clamped,
        safety,
        files: artifact_names(cfg),
    })
}

/// Rebuild the report of a run from its audit log alone.
pub fn replay_report(log: &AuditLog) -> Result<StageReport, OrchestratorError> {
    replay_report_with(log, Vec::new())
}

/// Parse a log that may have been cut off mid-write. A torn final line is
/// dropped and described in the returned gap notes; damage anywhere else is
/// an error.
pub fn read_log_lenient(text: &str) -> Result<(AuditLog, Vec<String>), OrchestratorError> {
    match AuditLog::read_ndjson(text.as_bytes()) {
        Ok(log) => Ok((log, Vec::new())),
        Err(AuditError::Parse { line, msg }) => {
            let lines: Vec<&str> = text.lines().collect();
            let last = lines.iter().rposition(|l| !l.trim().is_empty()).map(|i| i + 1);
            if Some(line) != last || line == 1 {
                return Err(AuditError::Parse { line, msg }.into());
            }
            let kept = lines[..line - 1].join("\n");
            let log = AuditLog::read_ndjson(kept.as_bytes())?;
            Ok((log, vec![format!("line {line} is incomplete and was skipped: {msg}")]))
        }
        Err(e) => Err(e.into()),
    }
}

/// [`replay_report`] with extra gap notes from loading.
pub fn replay_report_with(log: &AuditLog, load_gaps: Vec<String>) -> Result<StageReport, OrchestratorError> {
    let header = log.header();
    let cfg: ResolvedConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| OrchestratorError::Replay(format!("header config: {e}")))?;
    let npc_count = cfg.scenario.as_ref().map_or(0, |s| s.npcs.len());
    let events = log.events();
    let gts = events
        .iter()
        .filter(|e| e.stage == Stage::GtsSample)
        .map(|e| GtsRecord::from_event(e, npc_count))
        .collect::<Result<Vec<_>, _>>()?;
    let (records, bad) = assemble_all(events);
    let incomplete: Vec<CorrelationId> = bad.iter().map(|(c, _)| *c).collect();
    let mut tally = LinkTally::default();
    let mut clamped = 0;
    for e in events {
        match e.stage {
            Stage::PerturbIn => tally.sent += 1,
            Stage::PerturbOut if e.flag("dropped") => tally.dropped += 1,
            Stage::V2rDeliver => tally.delivered += 1,
            Stage::ActuatorApply if e.flag("clamped") => clamped += 1,
            _ => {}
        }
    }
    tally.in_flight = tally.sent - tally.delivered - tally.dropped;
    let (cycles, end_t, aborted, abort_reason, truncated, gaps) = match log.footer() {
        Some(f) => (f.cycles, f.end_t_ns, f.aborted, f.abort_reason.clone(), false, Vec::new()),
        None => {
            let mut gaps = vec!["log has no footer".to_string()];
            gaps.extend(load_gaps);
            gaps.extend(bad.iter().map(|(c, e)| format!("{c}: {e}")));
            let end = events.iter().map(|e| e.t).max().unwrap_or(TimestampNs::ZERO);
            (gts.len() as u64, end, false, None, true, gaps)
        }
    };
    compute_report(&ReportInputs {
        cfg: &cfg,
        stage: &header.stage,
        run_id: &header.run_id,
        gts: &gts,
        records: &records,
        incomplete: &incomplete,
        tally,
        clamped,
        cycles,
        end_t,
        aborted,
        abort_reason,
        truncated,
        gaps,
    })
}

pub fn read_log<R: BufRead>(r: R) -> Result<AuditLog, OrchestratorError> {
    Ok(AuditLog::read_ndjson(r)?)
}

pub fn write_report<W: Write>(mut w: W, report: &StageReport) -> std::io::Result<()> {
    w.write_all(report.to_json_string().as_bytes())?;
    w.write_all(b"\n")
}
