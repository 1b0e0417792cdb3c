//! The closed-loop run: one discrete-event loop over virtual time driving
//! GTS sampling, the R2V chain, the SUT, the V2R chain and the plant.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use log::{debug, warn};

use super::config::{ResolvedConfig, Termination};
use super::queue::EventQueue;
use super::report::{
    artifact_names, compute_report, safety_trace, target_progress, trajectory_rows, write_report, GtsRecord,
    LinkTally, NpcObs, ReportInputs, StageReport,
};
use super::scenario::NpcWorld;
use super::OrchestratorError;
use crate::audit::{AuditLog, RunFooter, RunHeader, Stage, TimedEvent, SCHEMA_VERSION};
use crate::geometry::Vec2;
use crate::links::{R2vLink, V2rLink, V2rOutcome};
use crate::plant::{Plant, RawCommand};
use crate::safety::{extract_events, write_trace_csv, AgentState};
use crate::spatial::{write_trajectory_csv, ProgressTracker, ReferencePath, TrajectorySample};
use crate::sut::{sut_by_name, ControlCommand, Observation, SutRunner};
use crate::temporal::{write_latency_csv, Component, LatencyRecord};
use crate::timebase::{ms_to_ns, secs_to_ns, CorrelationId, CorrelationIssuer, TimestampNs};

#[derive(Debug)]
enum Ev {
    Gts,
    Stage(CorrelationId, Stage),
    SutOut(CorrelationId, ControlCommand),
    Watchdog(CorrelationId, String),
    PerturbOut { cid: CorrelationId, fixed_ns: u64, jitter_ns: u64, fifo_wait_ns: u64 },
    Deliver { cid: CorrelationId, cmd: RawCommand, base_ns: u64 },
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub cfg: ResolvedConfig,
    pub log: AuditLog,
    pub report: StageReport,
    pub gts: Vec<GtsRecord>,
}

fn setup<E: std::fmt::Display>(e: E) -> OrchestratorError {
    OrchestratorError::Setup(e.to_string())
}

fn as_i64(ns: u64) -> i64 {
    i64::try_from(ns).unwrap_or(i64::MAX)
}

/// Same arithmetic as assembling a record from the log.
fn record_from(cid: CorrelationId, at: &[Option<TimestampNs>; 11]) -> Option<LatencyRecord> {
    let t = |s: Stage| at[s.rank()];
    let span = |a: Stage, b: Stage| t(b)?.checked_since(t(a)?);
    let dt_ingest = span(Stage::R2vIngestStart, Stage::R2vIngestDone)?;
    let dt_adv = span(Stage::R2vIngestDone, Stage::R2vAdvDone)?;
    let dt_sense = span(Stage::R2vAdvDone, Stage::R2vSenseDone)?;
    let dt_sut = span(Stage::SutCmdIn, Stage::SutCmdOut)?;
    let dt_v2r = span(Stage::PerturbIn, Stage::V2rDeliver)?;
    let dt_r2v = dt_ingest + dt_adv + dt_sense;
    let dt_platform = dt_v2r + dt_r2v;
    Some(LatencyRecord {
        correlation_id: cid,
        dt_sut,
        dt_v2r,
        dt_ingest,
        dt_adv,
        dt_sense,
        dt_r2v,
        dt_platform,
        dt_total: dt_sut + dt_platform,
    })
}

struct Engine<'a> {
    cfg: &'a ResolvedConfig,
    run_id: String,
    route: Arc<ReferencePath>,
    queue: EventQueue<Ev>,
    plant: Plant,
    r2v: R2vLink,
    v2r: V2rLink,
    sut: SutRunner,
    world: Option<NpcWorld>,
    npc_ids: Vec<String>,
    issuer: CorrelationIssuer,
    log: AuditLog,
    /// Per-cycle stage timestamps, indexed by `cid - 1`.
    times: Vec<[Option<TimestampNs>; 11]>,
    pending_obs: Vec<Option<Observation>>,
    gts: Vec<GtsRecord>,
    tracker: ProgressTracker,
    tally: LinkTally,
    clamped: u64,
    sampling: bool,
    abort: Option<String>,
}

impl Engine<'_> {
    fn emit(&mut self, event: TimedEvent) -> Result<(), OrchestratorError> {
        let slot = (event.cid.0 - 1) as usize;
        self.times[slot][event.stage.rank()] = Some(event.t);
        self.log.append(event)?;
        Ok(())
    }

    fn ev(&self, cid: CorrelationId, stage: Stage, t: TimestampNs) -> TimedEvent {
        TimedEvent::new(&self.run_id, cid, stage, t)
    }

    fn on_gts(&mut self, t: TimestampNs) -> Result<(), OrchestratorError> {
        if !self.sampling {
            return Ok(());
        }
        let cid = self.issuer.issue();
        self.times.push([None; 11]);
        let pose = self.plant.pose();
        let speed = self.plant.v_actual();
        let mut npcs = Vec::new();
        if let Some(world) = &mut self.world {
            world.observe_ego(t, pose.position);
            for (index, s) in world.states(t).into_iter().enumerate() {
                if let Some(s) = s {
                    npcs.push(NpcObs { index, position: s.position, velocity: s.velocity, radius: s.radius });
                }
            }
        }
        let rec = GtsRecord { cid, t, position: pose.position, heading: pose.heading, speed, npcs };
        let npc_count = self.npc_ids.len();
        self.emit(rec.to_event(&self.run_id, npc_count))?;
        self.emit(self.ev(cid, Stage::R2vIngestStart, t))?;

        let detections = rec
            .npcs
            .iter()
            .map(|n| AgentState {
                id: self.npc_ids[n.index].clone(),
                t,
                position: n.position,
                velocity: n.velocity,
                footprint_radius: n.radius,
            })
            .collect();
        self.pending_obs.push(Some(Observation {
            t,
            ego_pose: TrajectorySample::new(t, pose.position, pose.heading),
            ego_speed: speed,
            detections,
            route: self.route.clone(),
            goal_speed: self.cfg.sut.goal_speed,
        }));

        let sched = self.r2v.transmit(t);
        self.queue.schedule(sched.ingest_done, Ev::Stage(cid, Stage::R2vIngestDone))?;
        self.queue.schedule(sched.adv_done, Ev::Stage(cid, Stage::R2vAdvDone))?;
        self.queue.schedule(sched.sense_done, Ev::Stage(cid, Stage::R2vSenseDone))?;

        let progress = self.tracker.update(&self.route, pose.position);
        self.gts.push(rec);
        let next = t + ms_to_ns(self.cfg.r2v.sample_period_ms);
        let horizon = TimestampNs(secs_to_ns(self.cfg.termination.horizon_s()));
        let done = next >= horizon
            || match self.cfg.termination {
                Termination::Laps { .. } => target_progress(self.cfg, &self.route).is_some_and(|p| progress >= p),
                Termination::Duration { .. } => false,
            };
        if done {
            debug!("{}: sampling stops after {cid} at {t}", self.run_id);
            self.sampling = false;
        } else {
            self.queue.schedule(next, Ev::Gts)?;
        }
        Ok(())
    }

    fn on_sense_done(&mut self, cid: CorrelationId, t: TimestampNs) -> Result<(), OrchestratorError> {
        self.emit(self.ev(cid, Stage::R2vSenseDone, t))?;
        self.emit(self.ev(cid, Stage::SutCmdIn, t))?;
        let mut obs = self.pending_obs[(cid.0 - 1) as usize].take().expect("one observation per cycle");
        obs.t = t;
        let window = secs_to_ns(self.cfg.watchdog_periods as f64 * self.cfg.plant.control_period);
        let deadline = t + window;
        match self.sut.step(&obs) {
            Ok(cmd) if cmd.t_issued <= deadline => self.queue.schedule(cmd.t_issued, Ev::SutOut(cid, cmd)),
            Ok(cmd) => {
                let late = cmd.t_issued.as_millis_f64() - t.as_millis_f64();
                self.queue.schedule(deadline, Ev::Watchdog(cid, format!("SUT took {late:.3} ms")))
            }
            Err(e) => self.queue.schedule(deadline, Ev::Watchdog(cid, format!("SUT failed: {e}"))),
        }
    }

    fn on_sut_out(&mut self, cid: CorrelationId, cmd: ControlCommand, t: TimestampNs) -> Result<(), OrchestratorError> {
        self.emit(
            self.ev(cid, Stage::SutCmdOut, t).with("speed", cmd.speed_setpoint).with("steer", cmd.steer_setpoint),
        )?;
        self.emit(self.ev(cid, Stage::PerturbIn, t))?;
        self.tally.sent += 1;
        let raw = RawCommand { speed: cmd.speed_setpoint, steer: cmd.steer_setpoint };
        match self.v2r.transmit(t) {
            V2rOutcome::Dropped { .. } => {
                self.tally.dropped += 1;
                self.emit(self.ev(cid, Stage::PerturbOut, t).with("dropped", true))?;
            }
            V2rOutcome::Delivered { perturb_out, deliver, fixed_ns, jitter_ns, base_ns, fifo_wait_ns, .. } => {
                self.queue.schedule(perturb_out, Ev::PerturbOut { cid, fixed_ns, jitter_ns, fifo_wait_ns })?;
                self.queue.schedule(deliver, Ev::Deliver { cid, cmd: raw, base_ns })?;
            }
        }
        Ok(())
    }

    fn on_deliver(&mut self, cid: CorrelationId, cmd: RawCommand, base_ns: u64, t: TimestampNs) -> Result<(), OrchestratorError> {
        self.emit(self.ev(cid, Stage::V2rDeliver, t).with("base_ns", as_i64(base_ns)))?;
        self.tally.delivered += 1;
        match self.plant.apply(cmd) {
            Ok(sp) => {
                if sp.clamped {
                    self.clamped += 1;
                }
                self.emit(
                    self.ev(cid, Stage::ActuatorApply, t)
                        .with("sp_speed", sp.speed)
                        .with("sp_steer", sp.steer)
                        .with("clamped", sp.clamped),
                )?;
            }
            Err(e) => self.abort = Some(format!("{cid}: plant rejected command: {e}")),
        }
        Ok(())
    }

    fn dispatch(&mut self, t: TimestampNs, ev: Ev) -> Result<(), OrchestratorError> {
        match ev {
            Ev::Gts => self.on_gts(t),
            Ev::Stage(cid, Stage::R2vSenseDone) => self.on_sense_done(cid, t),
            Ev::Stage(cid, stage) => self.emit(self.ev(cid, stage, t)),
            Ev::SutOut(cid, cmd) => self.on_sut_out(cid, cmd, t),
            Ev::Watchdog(cid, why) => {
                warn!("{}: watchdog expired for {cid}: {why}", self.run_id);
                self.abort = Some(format!("watchdog: no command for {cid} within {} control periods ({why})", self.cfg.watchdog_periods));
                Ok(())
            }
            Ev::PerturbOut { cid, fixed_ns, jitter_ns, fifo_wait_ns } => self.emit(
                self.ev(cid, Stage::PerturbOut, t)
                    .with("fixed_ns", as_i64(fixed_ns))
                    .with("jitter_ns", as_i64(jitter_ns))
                    .with("fifo_wait_ns", as_i64(fifo_wait_ns)),
            ),
            Ev::Deliver { cid, cmd, base_ns } => self.on_deliver(cid, cmd, base_ns, t),
        }
    }
}

/// Execute one closed-loop run. Configuration problems are errors; runtime
/// failures (watchdog, plant rejection) end the run early with an aborted
/// report.
pub fn run(cfg: &ResolvedConfig, stage: &str) -> Result<RunOutput, OrchestratorError> {
    cfg.validate()?;
    let run_id = format!("{stage}-{:016x}", cfg.seed);
    let route = Arc::new(cfg.route());
    let start = TrajectorySample::new(TimestampNs::ZERO, Vec2::new(cfg.start.x, cfg.start.y), cfg.start.heading);
    let mut sut = SutRunner::new(sut_by_name(&cfg.sut.name, cfg.sut.params).map_err(setup)?, cfg.sut.latency.clone(), cfg.seed)
        .map_err(setup)?;
    sut.reset(route.clone(), cfg.seed).map_err(setup)?;
    let world = cfg.scenario.clone().map(NpcWorld::new).transpose().map_err(OrchestratorError::Setup)?;
    let npc_ids = cfg.scenario.as_ref().map(|s| s.npcs.iter().map(|n| n.id.clone()).collect()).unwrap_or_default();
    let header = RunHeader {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.clone(),
        stage: stage.to_owned(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).map_err(setup)?,
    };
    let mut eng = Engine {
        cfg,
        run_id,
        route,
        queue: EventQueue::new(),
        plant: Plant::new(cfg.plant.clone(), start, cfg.seed).map_err(setup)?,
        r2v: R2vLink::new(cfg.r2v.clone(), cfg.seed).map_err(setup)?,
        v2r: V2rLink::new(cfg.v2r.clone(), cfg.seed).map_err(setup)?,
        sut,
        world,
        npc_ids,
        issuer: CorrelationIssuer::new(),
        log: AuditLog::new(header),
        times: Vec::new(),
        pending_obs: Vec::new(),
        gts: Vec::new(),
        tracker: ProgressTracker::new(),
        tally: LinkTally::default(),
        clamped: 0,
        sampling: true,
        abort: None,
    };
    eng.queue.schedule(TimestampNs::ZERO, Ev::Gts)?;
    let mut end_t = TimestampNs::ZERO;
    while let Some((t, ev)) = eng.queue.pop() {
        eng.plant.advance_to(t);
        end_t = t;
        eng.dispatch(t, ev)?;
        if eng.abort.is_some() {
            break;
        }
    }
    let aborted = eng.abort.is_some();
    eng.tally.in_flight = eng.tally.sent - eng.tally.delivered - eng.tally.dropped;
    let cycles = eng.issuer.issued();
    eng.log.finish(RunFooter { end_t_ns: end_t, aborted, abort_reason: eng.abort.clone(), cycles });

    let mut records = Vec::new();
    let mut incomplete = Vec::new();
    for (i, at) in eng.times.iter().enumerate() {
        let cid = CorrelationId(i as u64 + 1);
        match record_from(cid, at) {
            Some(r) => records.push(r),
            None => incomplete.push(cid),
        }
    }
    let report = compute_report(&ReportInputs {
        cfg,
        stage,
        run_id: &eng.run_id,
        gts: &eng.gts,
        records: &records,
        incomplete: &incomplete,
        tally: eng.tally,
        clamped: eng.clamped,
        cycles,
        end_t,
        aborted,
        abort_reason: eng.abort.clone(),
        truncated: false,
        gaps: Vec::new(),
    })?;
    debug!("{}: {} cycles, end {end_t}, aborted {aborted}", eng.run_id, cycles);
    Ok(RunOutput { cfg: cfg.clone(), log: eng.log, report, gts: eng.gts })
}

/// Write the run's artifacts into `dir`; returns the file names written.
pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<Vec<String>, OrchestratorError> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>, OrchestratorError> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    out.log.write_ndjson(create("audit.ndjson")?)?;
    write_report(create("report.json")?, &out.report)?;
    let route = out.cfg.route();
    write_trajectory_csv(create("trajectory.csv")?, &trajectory_rows(&out.cfg, &route, &out.gts))?;
    let stats: Vec<_> = out
        .report
        .latency
        .iter()
        .filter_map(|c| Component::ALL.iter().find(|k| k.name() == c.component).map(|k| (*k, c.stats)))
        .collect();
    debug_assert_eq!(stats.len(), out.report.latency.len());
    write_latency_csv(create("latency.csv")?, &stats)?;
    if out.cfg.scenario.is_some() {
        let trace = safety_trace(&out.cfg, &out.gts)?;
        write_trace_csv(create("safety.csv")?, &trace)?;
        let events = extract_events(&trace, &out.cfg.events);
        serde_json::to_writer_pretty(create("events.json")?, &events).map_err(|e| OrchestratorError::Io(e.into()))?;
    }
    Ok(artifact_names(&out.cfg))
}
