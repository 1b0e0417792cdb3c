//! Decomposable latency model.
//!
//! Per-cycle records are assembled from the stage timestamps of one
//! correlation ID:
//!
//! ```text
//! r2v      = ingest + adv + sense
//! platform = v2r + r2v
//! total    = sut + platform
//! ```
//!
//! All arithmetic is in integer nanoseconds, so the identities hold exactly.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{Stage, TimedEvent};
use crate::stats::nearest_rank;
use crate::timebase::{CorrelationId, TimestampNs};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatencyError {
    #[error("incomplete cycle: missing {0}")]
    IncompleteCycle(&'static str),
    #[error("ordering corruption: {later} precedes {earlier}")]
    OrderingCorruption { earlier: &'static str, later: &'static str },
    #[error("events from more than one correlation id")]
    MixedCorrelation,
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub correlation_id: CorrelationId,
    pub dt_sut: u64,
    pub dt_v2r: u64,
    pub dt_ingest: u64,
    pub dt_adv: u64,
    pub dt_sense: u64,
    pub dt_r2v: u64,
    pub dt_platform: u64,
    pub dt_total: u64,
}

/// Selects one latency component of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    R2v,
    Ingest,
    Adv,
    Sense,
    V2r,
    Sut,
    Platform,
    Total,
}

impl Component {
    /// Report order.
    pub const ALL: [Component; 8] = [
        Component::R2v,
        Component::Ingest,
        Component::Adv,
        Component::Sense,
        Component::V2r,
        Component::Sut,
        Component::Platform,
        Component::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::R2v => "r2v",
            Component::Ingest => "ingest",
            Component::Adv => "adv",
            Component::Sense => "sense",
            Component::V2r => "v2r",
            Component::Sut => "sut",
            Component::Platform => "platform",
            Component::Total => "total",
        }
    }

    pub fn of(self, r: &LatencyRecord) -> u64 {
        match self {
            Component::R2v => r.dt_r2v,
            Component::Ingest => r.dt_ingest,
            Component::Adv => r.dt_adv,
            Component::Sense => r.dt_sense,
            Component::V2r => r.dt_v2r,
            Component::Sut => r.dt_sut,
            Component::Platform => r.dt_platform,
            Component::Total => r.dt_total,
        }
    }
}

const REQUIRED: [Stage; 8] = [
    Stage::R2vIngestStart,
    Stage::R2vIngestDone,
    Stage::R2vAdvDone,
    Stage::R2vSenseDone,
    Stage::SutCmdIn,
    Stage::SutCmdOut,
    Stage::PerturbIn,
    Stage::V2rDeliver,
];

/// Build the latency record of one cycle from its events.
pub fn assemble_record<'a, I>(events: I) -> Result<LatencyRecord, LatencyError>
where
    I: IntoIterator<Item = &'a TimedEvent>,
{
    let mut cid = None;
    let mut at: [Option<TimestampNs>; 11] = [None; 11];
    for e in events {
        match cid {
            None => cid = Some(e.cid),
            Some(c) if c != e.cid => return Err(LatencyError::MixedCorrelation),
            _ => {}
        }
        at[e.stage.rank()] = Some(e.t);
    }
    let mut t = [TimestampNs::ZERO; 8];
    for (slot, stage) in t.iter_mut().zip(REQUIRED) {
        *slot = at[stage.rank()].ok_or(LatencyError::IncompleteCycle(stage.name()))?;
    }
    let span = |a: usize, b: usize| -> Result<u64, LatencyError> {
        t[b].checked_since(t[a]).ok_or(LatencyError::OrderingCorruption {
            earlier: REQUIRED[a].name(),
            later: REQUIRED[b].name(),
        })
    };
    let dt_ingest = span(0, 1)?;
    let dt_adv = span(1, 2)?;
    let dt_sense = span(2, 3)?;
    let dt_sut = span(4, 5)?;
    let dt_v2r = span(6, 7)?;
    let dt_r2v = dt_ingest + dt_adv + dt_sense;
    let dt_platform = dt_v2r + dt_r2v;
    Ok(LatencyRecord {
        correlation_id: cid.unwrap_or(CorrelationId::NONE),
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

/// Group a run's events by correlation ID (ascending) and assemble each
/// cycle. Incomplete cycles come back separately with their error.
pub fn assemble_all(events: &[TimedEvent]) -> (Vec<LatencyRecord>, Vec<(CorrelationId, LatencyError)>) {
    let mut by_cid: BTreeMap<CorrelationId, Vec<&TimedEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.cid != CorrelationId::NONE) {
        by_cid.entry(e.cid).or_default().push(e);
    }
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (cid, evs) in by_cid {
        match assemble_record(evs.into_iter()) {
            Ok(r) => ok.push(r),
            Err(e) => bad.push((cid, e)),
        }
    }
    (ok, bad)
}

/// Sample statistics of one latency component, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
    /// `std / mean`; absent when the mean is zero.
    pub cv: Option<f64>,
    pub p95: f64,
    pub n: usize,
}

pub fn aggregate(records: &[LatencyRecord], component: Component) -> Result<LatencyStats, LatencyError> {
    if records.len() < 2 {
        return Err(LatencyError::TooFewRecords(records.len()));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut values = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        let x = component.of(r) as f64 * 1e-6;
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
        values.push(x);
    }
    let n = records.len();
    let std = (m2 / (n - 1) as f64).max(0.0).sqrt();
    let cv = (mean > 0.0).then(|| std / mean);
    Ok(LatencyStats { mean, std, cv, p95: nearest_rank(&mut values, 95), n })
}

/// Stats for every component, in report order. Empty when fewer than two
/// records exist.
pub fn aggregate_all(records: &[LatencyRecord]) -> Vec<(Component, LatencyStats)> {
    Component::ALL
        .iter()
        .filter_map(|&c| aggregate(records, c).ok().map(|s| (c, s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub total: usize,
    pub complete: usize,
    pub fraction: f64,
    pub violations: Vec<CorrelationId>,
}

/// Check the three sum identities on every record.
pub fn check_completeness(records: &[LatencyRecord]) -> CompletenessReport {
    let violations: Vec<CorrelationId> = records
        .iter()
        .filter(|r| {
            r.dt_r2v != r.dt_ingest + r.dt_adv + r.dt_sense
                || r.dt_platform != r.dt_v2r + r.dt_r2v
                || r.dt_total != r.dt_sut + r.dt_platform
        })
        .map(|r| r.correlation_id)
        .collect();
    let total = records.len();
    let complete = total - violations.len();
    let fraction = if total == 0 { 1.0 } else { complete as f64 / total as f64 };
    CompletenessReport { total, complete, fraction, violations }
}

/// Write `component,mean_ms,std_ms,cv,p95_ms,n`. CV is rounded to two
/// decimals; the JSON report keeps full precision.
pub fn write_latency_csv<W: Write>(w: W, stats: &[(Component, LatencyStats)]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["component", "mean_ms", "std_ms", "cv", "p95_ms", "n"])?;
    for (c, s) in stats {
        wtr.write_record([
            c.name().to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.cv.map(|v| format!("{v:.2}")).unwrap_or_default(),
            s.p95.to_string(),
            s.n.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
