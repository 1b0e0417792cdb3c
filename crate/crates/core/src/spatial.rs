//! Reference-path error model: projection, cross-track error (CTE),
//! along-track error (ATE) and trajectory statistics.
//!
//! Paths are planar polylines parameterized by arclength. Projection is
//! computed segment by segment in closed form; when several segments are
//! equally close the lowest segment index wins.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Vec2};
use crate::stats::{MetricSummary, StatsError};
use crate::timebase::TimestampNs;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("path needs at least {min} vertices, got {got}")]
    TooFewVertices { min: usize, got: usize },
    #[error("vertex {0} is not finite")]
    NonFinite(usize),
    #[error("segment {0} has zero length")]
    ZeroLengthSegment(usize),
    #[error("desired arclength {s_d} outside [0, {total}]")]
    ArclengthOutOfRange { s_d: f64, total: f64 },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("path json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<StatsError> for PathError {
    fn from(_: StatsError) -> Self {
        PathError::EmptyTrajectory
    }
}

/// On-disk path document: `{"closed": bool, "vertices": [[x, y], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathDoc {
    pub closed: bool,
    pub vertices: Vec<Vec2>,
}

/// Arclength-parameterized polyline. Closed paths have an implied segment
/// from the last vertex back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathDoc", into = "PathDoc")]
pub struct ReferencePath {
    vertices: Vec<Vec2>,
    cumulative: Vec<f64>,
    closed: bool,
    total: f64,
}

impl TryFrom<PathDoc> for ReferencePath {
    type Error = PathError;
    fn try_from(doc: PathDoc) -> Result<Self, PathError> {
        ReferencePath::new(doc.vertices, doc.closed)
    }
}

impl From<ReferencePath> for PathDoc {
    fn from(p: ReferencePath) -> Self {
        PathDoc { closed: p.closed, vertices: p.vertices }
    }
}

/// Closest point on a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub point: Vec2,
    pub arclength: f64,
    pub segment_index: usize,
    pub distance: f64,
}

impl ReferencePath {
    pub fn new(vertices: Vec<Vec2>, closed: bool) -> Result<Self, PathError> {
        let min = if closed { 3 } else { 2 };
        if vertices.len() < min {
            return Err(PathError::TooFewVertices { min, got: vertices.len() });
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(PathError::NonFinite(i));
        }
        let n = vertices.len();
        let nseg = if closed { n } else { n - 1 };
        let mut cumulative = Vec::with_capacity(n);
        let mut s = 0.0;
        cumulative.push(0.0);
        for i in 0..nseg {
            let len = vertices[i].distance(vertices[(i + 1) % n]);
            if len <= 0.0 {
                return Err(PathError::ZeroLengthSegment(i));
            }
            s += len;
            if i + 1 < n {
                cumulative.push(s);
            }
        }
        Ok(Self { vertices, cumulative, closed, total: s })
    }

    pub fn from_json_str(s: &str) -> Result<Self, PathError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, PathError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn cumulative_arclength(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn total_length(&self) -> f64 {
        self.total
    }

    pub fn segment_count(&self) -> usize {
        if self.closed {
            self.vertices.len()
        } else {
            self.vertices.len() - 1
        }
    }

    pub fn segment(&self, i: usize) -> (Vec2, Vec2) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    fn segment_len(&self, i: usize) -> f64 {
        let end = if i + 1 < self.cumulative.len() { self.cumulative[i + 1] } else { self.total };
        end - self.cumulative[i]
    }

    /// Closest point of the path to `p`, ties resolved to the lowest
    /// segment index.
    pub fn project(&self, p: Vec2) -> Projection {
        let mut best: Option<Projection> = None;
        let mut best_d2 = f64::INFINITY;
        for i in 0..self.segment_count() {
            let (a, b) = self.segment(i);
            let ab = b - a;
            let u = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
            let q = a + ab * u;
            let d2 = (p - q).norm_sq();
            if d2 < best_d2 {
                best_d2 = d2;
                best = Some(Projection {
                    point: q,
                    arclength: self.cumulative[i] + u * self.segment_len(i),
                    segment_index: i,
                    distance: 0.0,
                });
            }
        }
        let mut proj = best.expect("valid path has at least one segment");
        proj.distance = p.distance(proj.point);
        proj
    }

    /// Cross-track error: distance from `p` to its projection.
    pub fn cte(&self, p: Vec2) -> f64 {
        self.project(p).distance
    }

    /// Along-track error `s(p*) - s_d`; positive means ahead of schedule.
    /// On closed paths the difference is taken on the nearest lap, so
    /// `|ate| <= total_length / 2`.
    pub fn ate(&self, p: Vec2, s_d: f64) -> Result<f64, PathError> {
        if !(0.0..=self.total).contains(&s_d) {
            return Err(PathError::ArclengthOutOfRange { s_d, total: self.total });
        }
        let diff = self.project(p).arclength - s_d;
        Ok(if self.closed { self.wrap_arclength_delta(diff) } else { diff })
    }

    /// Map an arclength difference on a closed path onto (-L/2, L/2].
    pub fn wrap_arclength_delta(&self, d: f64) -> f64 {
        let l = self.total;
        let mut w = d % l;
        if w <= -l / 2.0 {
            w += l;
        } else if w > l / 2.0 {
            w -= l;
        }
        w
    }

    /// Normalize an arclength onto the path: wraps on closed paths, clamps
    /// on open ones.
    pub fn normalize_arclength(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total)
        } else {
            s.clamp(0.0, self.total)
        }
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = self.normalize_arclength(s);
        let i = match self.cumulative.partition_point(|&c| c <= s) {
            0 => 0,
            k => (k - 1).min(self.segment_count() - 1),
        };
        let u = ((s - self.cumulative[i]) / self.segment_len(i)).clamp(0.0, 1.0);
        (i, u)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, u) = self.locate(s);
        let (a, b) = self.segment(i);
        a.lerp(b, u)
    }

    /// Unit tangent direction (radians) of the segment containing `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        let (a, b) = self.segment(i);
        (b - a).angle()
    }

    pub fn to_doc(&self) -> PathDoc {
        PathDoc { closed: self.closed, vertices: self.vertices.clone() }
    }
}

/// One GTS pose sample on the actual trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: TimestampNs,
    pub position: Vec2,
    pub heading: f64,
}

impl TrajectorySample {
    pub fn new(t: TimestampNs, position: Vec2, heading: f64) -> Self {
        Self { t, position, heading: wrap_angle(heading) }
    }
}

/// Summary of per-sample CTE over a trajectory.
pub fn trajectory_stats(path: &ReferencePath, traj: &[TrajectorySample]) -> Result<MetricSummary, PathError> {
    if traj.is_empty() {
        return Err(PathError::EmptyTrajectory);
    }
    let cte: Vec<f64> = traj.iter().map(|s| path.cte(s.position)).collect();
    Ok(MetricSummary::from_values(&cte)?)
}

/// Progress tracking along a path from a sequence of positions.
///
/// Successive projections are unwrapped with the nearest-lap rule, so the
/// result counts laps on closed paths.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    start_s: Option<f64>,
    last_s: f64,
    progress: f64,
}

impl Default for ProgressTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl ProgressTracker {
    pub fn new() -> Self {
        Self { start_s: None, last_s: 0.0, progress: 0.0 }
    }

    pub fn update(&mut self, path: &ReferencePath, p: Vec2) -> f64 {
        let s = path.project(p).arclength;
        match self.start_s {
            None => {
                self.start_s = Some(s);
            }
            Some(_) => {
                let d = s - self.last_s;
                self.progress += if path.is_closed() { path.wrap_arclength_delta(d) } else { d };
            }
        }
        self.last_s = s;
        self.progress
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }
}

/// One exported trajectory row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub sample: TrajectorySample,
    pub cte: f64,
    pub ate: f64,
}

/// Write `t_ns,x,y,heading,cte,ate`.
pub fn write_trajectory_csv<W: Write>(w: W, rows: &[TrajectoryRow]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t_ns", "x", "y", "heading", "cte", "ate"])?;
    for r in rows {
        wtr.write_record([
            r.sample.t.0.to_string(),
            r.sample.position.x.to_string(),
            r.sample.position.y.to_string(),
            r.sample.heading.to_string(),
            r.cte.to_string(),
            r.ate.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
