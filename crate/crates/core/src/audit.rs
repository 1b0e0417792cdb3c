//! Append-only audit log of correlation-ID'd stage events.
//!
//! On disk the log is newline-delimited JSON with lexicographically sorted
//! keys. The first line is a `{"header": ...}` record carrying the resolved
//! run configuration, every following line is one [`TimedEvent`], and a
//! complete log ends with a `{"footer": ...}` record. A missing footer marks
//! a truncated log.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timebase::{CorrelationId, TimestampNs};

pub const SCHEMA_VERSION: u32 = 1;

/// Stages of one HIL cycle, in timing-chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    GtsSample,
    R2vIngestStart,
    R2vIngestDone,
    R2vAdvDone,
    R2vSenseDone,
    SutCmdIn,
    SutCmdOut,
    PerturbIn,
    PerturbOut,
    V2rDeliver,
    ActuatorApply,
}

impl Stage {
    pub const CHAIN: [Stage; 11] = [
        Stage::GtsSample,
        Stage::R2vIngestStart,
        Stage::R2vIngestDone,
        Stage::R2vAdvDone,
        Stage::R2vSenseDone,
        Stage::SutCmdIn,
        Stage::SutCmdOut,
        Stage::PerturbIn,
        Stage::PerturbOut,
        Stage::V2rDeliver,
        Stage::ActuatorApply,
    ];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::GtsSample => "GtsSample",
            Stage::R2vIngestStart => "R2vIngestStart",
            Stage::R2vIngestDone => "R2vIngestDone",
            Stage::R2vAdvDone => "R2vAdvDone",
            Stage::R2vSenseDone => "R2vSenseDone",
            Stage::SutCmdIn => "SutCmdIn",
            Stage::SutCmdOut => "SutCmdOut",
            Stage::PerturbIn => "PerturbIn",
            Stage::PerturbOut => "PerturbOut",
            Stage::V2rDeliver => "V2rDeliver",
            Stage::ActuatorApply => "ActuatorApply",
        }
    }
}

/// Payload value. Floats must be finite so the log stays valid JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn as_f64(self) -> Option<f64> {
        match self {
            Scalar::Float(v) => Some(v),
            Scalar::Int(v) => Some(v as f64),
            Scalar::Bool(_) => None,
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Scalar::Bool(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_i64(self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(v),
            _ => None,
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Float(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

pub type Payload = BTreeMap<String, Scalar>;

/// One audit record. Field order here is the sorted on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedEvent {
    pub cid: CorrelationId,
    pub payload: Payload,
    pub run_id: String,
    pub stage: Stage,
    #[serde(rename = "t_ns")]
    pub t: TimestampNs,
}

impl TimedEvent {
    pub fn new(run_id: &str, cid: CorrelationId, stage: Stage, t: TimestampNs) -> Self {
        Self { cid, payload: Payload::new(), run_id: run_id.to_owned(), stage, t }
    }

    pub fn with(mut self, key: &str, value: impl Into<Scalar>) -> Self {
        self.payload.insert(key.to_owned(), value.into());
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.payload.get(key).and_then(|s| s.as_f64())
    }

    pub fn flag(&self, key: &str) -> bool {
        self.payload.get(key).and_then(|s| s.as_bool()).unwrap_or(false)
    }
}

/// First line of every log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub schema_version: u32,
    pub run_id: String,
    pub stage: String,
    pub seed: u64,
    /// Resolved configuration, every parameter explicit.
    pub config: serde_json::Value,
}

/// Last line of a complete log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFooter {
    pub end_t_ns: TimestampNs,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub cycles: u64,
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("out-of-order event for {cid}: {stage:?}@{t} after {prev_stage:?}@{prev_t}")]
    Ordering {
        cid: CorrelationId,
        stage: Stage,
        t: TimestampNs,
        prev_stage: Stage,
        prev_t: TimestampNs,
    },
    #[error("event for {cid} carries non-finite payload value `{key}`")]
    NonFinite { cid: CorrelationId, key: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty audit log")]
    Empty,
}

/// In-memory append-only log owned by one run.
#[derive(Debug, Clone)]
pub struct AuditLog {
    header: RunHeader,
    events: Vec<TimedEvent>,
    last: HashMap<CorrelationId, (TimestampNs, Stage)>,
    footer: Option<RunFooter>,
}

impl AuditLog {
    pub fn new(header: RunHeader) -> Self {
        Self { header, events: Vec::new(), last: HashMap::new(), footer: None }
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn footer(&self) -> Option<&RunFooter> {
        self.footer.as_ref()
    }

    pub fn append(&mut self, event: TimedEvent) -> Result<(), AuditError> {
        for (key, v) in &event.payload {
            if let Scalar::Float(f) = v {
                if !f.is_finite() {
                    return Err(AuditError::NonFinite { cid: event.cid, key: key.clone() });
                }
            }
        }
        if let Some(&(prev_t, prev_stage)) = self.last.get(&event.cid) {
            if event.t < prev_t || event.stage.rank() <= prev_stage.rank() {
                return Err(AuditError::Ordering {
                    cid: event.cid,
                    stage: event.stage,
                    t: event.t,
                    prev_stage,
                    prev_t,
                });
            }
        }
        self.last.insert(event.cid, (event.t, event.stage));
        self.events.push(event);
        Ok(())
    }

    pub fn finish(&mut self, footer: RunFooter) {
        self.footer = Some(footer);
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        write_sorted_line(&mut w, &serde_json::json!({ "header": self.header }))?;
        for e in &self.events {
            write_sorted_line(&mut w, e)?;
        }
        if let Some(f) = &self.footer {
            write_sorted_line(&mut w, &serde_json::json!({ "footer": f }))?;
        }
        w.flush()
    }

    pub fn to_ndjson_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parse a log written by [`AuditLog::write_ndjson`]. Event ordering is
    /// re-validated on the way in.
    pub fn read_ndjson<R: BufRead>(r: R) -> Result<AuditLog, AuditError> {
        let mut log: Option<AuditLog> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| AuditError::Parse { line: lineno, msg };
            let value: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            match log.as_mut() {
                None => {
                    let header = value
                        .get("header")
                        .ok_or_else(|| parse_err("first line must be the run header".into()))?;
                    let header: RunHeader = serde_json::from_value(header.clone())
                        .map_err(|e| parse_err(e.to_string()))?;
                    log = Some(AuditLog::new(header));
                }
                Some(log) => {
                    if log.footer.is_some() {
                        return Err(parse_err("content after footer".into()));
                    }
                    if let Some(footer) = value.get("footer") {
                        let footer: RunFooter = serde_json::from_value(footer.clone())
                            .map_err(|e| parse_err(e.to_string()))?;
                        log.finish(footer);
                    } else {
                        let event: TimedEvent =
                            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
                        log.append(event).map_err(|e| parse_err(e.to_string()))?;
                    }
                }
            }
        }
        log.ok_or(AuditError::Empty)
    }
}

fn write_sorted_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    // Round-trip through Value: its map type is ordered, which sorts keys at
    // every nesting level.
    let v = serde_json::to_value(value).map_err(io::Error::other)?;
    serde_json::to_writer(&mut *w, &v).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> RunHeader {
        RunHeader {
            schema_version: SCHEMA_VERSION,
            run_id: "r".into(),
            stage: "test".into(),
            seed: 1,
            config: serde_json::json!({"b": 1, "a": 2}),
        }
    }

    #[test]
    fn in_order_events_are_logged() {
        let mut log = AuditLog::new(header());
        let cid = CorrelationId(1);
        log.append(TimedEvent::new("r", cid, Stage::GtsSample, TimestampNs(10))).unwrap();
        log.append(TimedEvent::new("r", cid, Stage::R2vIngestStart, TimestampNs(12))).unwrap();
        assert_eq!(log.events().len(), 2);
    }

    #[test]
    fn stage_or_time_regressions_are_rejected() {
        let mut log = AuditLog::new(header());
        let cid = CorrelationId(3);
        log.append(TimedEvent::new("r", cid, Stage::R2vSenseDone, TimestampNs(9))).unwrap();
        let err = log.append(TimedEvent::new("r", cid, Stage::R2vAdvDone, TimestampNs(5)));
        assert!(matches!(err, Err(AuditError::Ordering { .. })));
        // later stage but earlier time
        let err = log.append(TimedEvent::new("r", cid, Stage::SutCmdIn, TimestampNs(8)));
        assert!(matches!(err, Err(AuditError::Ordering { .. })));
        // other correlation IDs are unaffected
        log.append(TimedEvent::new("r", CorrelationId(4), Stage::GtsSample, TimestampNs(1))).unwrap();
    }

    #[test]
    fn non_finite_payload_rejected() {
        let mut log = AuditLog::new(header());
        let e = TimedEvent::new("r", CorrelationId(1), Stage::GtsSample, TimestampNs(0))
            .with("x", f64::INFINITY);
        assert!(matches!(log.append(e), Err(AuditError::NonFinite { .. })));
    }

    #[test]
    fn lines_have_sorted_keys_and_round_trip() {
        let mut log = AuditLog::new(header());
        log.append(
            TimedEvent::new("r", CorrelationId(1), Stage::PerturbOut, TimestampNs(5))
                .with("zeta", 0.1)
                .with("dropped", true)
                .with("count", 3i64),
        )
        .unwrap();
        log.finish(RunFooter { end_t_ns: TimestampNs(6), aborted: false, abort_reason: None, cycles: 1 });
        let text = log.to_ndjson_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with(r#"{"header":{"config":{"a":2,"b":1},"#));
        assert_eq!(
            lines[1],
            r#"{"cid":1,"payload":{"count":3,"dropped":true,"zeta":0.1},"run_id":"r","stage":"PerturbOut","t_ns":5}"#
        );
        let back = AuditLog::read_ndjson(text.as_bytes()).unwrap();
        assert_eq!(back.events(), log.events());
        assert_eq!(back.footer(), log.footer());
        assert_eq!(back.to_ndjson_string(), text);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(AuditLog::read_ndjson("".as_bytes()), Err(AuditError::Empty)));
    }
}
