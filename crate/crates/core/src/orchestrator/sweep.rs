//! Stage 2: closed-loop response to an added fixed V2R delay.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{parse_json, ResolvedConfig, RunConfig};
use super::engine::{run, RunOutput};
use super::{ConfigError, OrchestratorError};
use crate::links::PerturbationConfig;
use crate::rng::derive_seed;
use crate::timebase::ms_to_ns;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub delays_ms: Vec<f64>,
    #[serde(default = "one")]
    pub repetitions: u32,
}

fn one() -> u32 {
    1
}

impl SweepConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_json_str(&text)?;
        cfg.base.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.delays_ms.is_empty() {
            return Err(ConfigError::invalid("delays_ms", "at least one delay is required"));
        }
        if let Some(d) = self.delays_ms.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(ConfigError::invalid("delays_ms", format!("delay {d} must be finite and >= 0")));
        }
        if self.repetitions == 0 {
            return Err(ConfigError::invalid("repetitions", "must be >= 1"));
        }
        Ok(())
    }

    /// Seed of repetition `rep` at `delay_ms`, derived from the base seed
    /// (or its override).
    pub fn run_seed(&self, delay_ms: f64, rep: u32, seed_override: Option<u64>) -> u64 {
        let base = seed_override.unwrap_or(self.base.seed);
        derive_seed(base, &format!("sweep/{}/{rep}", ms_to_ns(delay_ms)))
    }

    /// The resolved configuration of one sweep point.
    pub fn resolve_point(&self, delay_ms: f64, rep: u32, seed_override: Option<u64>) -> Result<ResolvedConfig, ConfigError> {
        let mut cfg = self.base.clone();
        let mut p = cfg.links.perturbation.clone().unwrap_or_else(PerturbationConfig::none);
        p.fixed_delay_ms = delay_ms;
        cfg.links.perturbation = Some(p);
        cfg.resolve_seeded(Some(self.run_seed(delay_ms, rep, seed_override)))
    }
}

/// The frozen cliff fixture: two laps of the circle at 0.8 m/s with a
/// fixed 0.5 m lookahead and a 0.1 m departure limit. Below roughly 30 ms of
/// added delay the loop is stable; beyond it steering lag and delay sustain
/// a growing weave.
pub fn cliff_fixture() -> SweepConfig {
    let mut base = super::config::stage1_default(42);
    base.path = super::config::PathSource::Builtin { name: "circle".into() };
    base.termination = super::config::Termination::Laps { laps: 2.0, max_seconds: 60.0 };
    base.departure_limit_m = 0.1;
    base.sut.goal_speed = 0.8;
    base.sut.params = Some(crate::sut::PurePursuitParams {
        k_v: 0.0,
        l_min: 0.5,
        l_max: 0.5,
        a_lat_max: 10.0,
        ..Default::default()
    });
    SweepConfig { base, delays_ms: vec![0.0, 10.0, 20.0, 40.0, 60.0, 80.0], repetitions: 1 }
}

/// One row of the response curve; metrics average the repetitions that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delay_ms: f64,
    pub cte_rmse_m: f64,
    pub cte_mean_m: f64,
    pub cte_p95_m: f64,
    pub distance_m: f64,
    /// All repetitions completed.
    pub completed: bool,
    pub runs: u32,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub delay_ms: f64,
    pub rep: u32,
    pub outcome: Result<RunOutput, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Sorted by delay.
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Smallest delay from which every row fails to complete.
    pub fn cliff_ms(&self) -> Option<f64> {
        let mut cliff = None;
        for r in self.rows.iter().rev() {
            if r.completed {
                break;
            }
            cliff = Some(r.delay_ms);
        }
        cliff
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["delay_ms", "cte_rmse_m", "cte_mean_m", "cte_p95_m", "distance_m", "completed"])?;
        for r in &self.rows {
            wtr.write_record([
                r.delay_ms.to_string(),
                r.cte_rmse_m.to_string(),
                r.cte_mean_m.to_string(),
                r.cte_p95_m.to_string(),
                r.distance_m.to_string(),
                r.completed.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Per-run artifact directory relative to the sweep output.
    pub fn point_dir(delay_ms: f64, rep: u32) -> PathBuf {
        PathBuf::from(format!("delay_{delay_ms}ms_rep{rep}"))
    }
}

/// Run every (delay, repetition) point in parallel. A failing point is
/// recorded in its row and does not stop the sweep.
pub fn run_sweep(cfg: &SweepConfig, seed_override: Option<u64>) -> Result<SweepResult, OrchestratorError> {
    cfg.validate()?;
    let mut delays = cfg.delays_ms.clone();
    delays.sort_by(f64::total_cmp);
    delays.dedup();
    // resolve up front so configuration errors surface before any run
    let jobs: Vec<(f64, u32, ResolvedConfig)> = delays
        .iter()
        .flat_map(|&d| (0..cfg.repetitions).map(move |r| (d, r)))
        .map(|(d, r)| cfg.resolve_point(d, r, seed_override).map(|c| (d, r, c)))
        .collect::<Result<_, _>>()?;
    let points: Vec<SweepPoint> = jobs
        .into_par_iter()
        .map(|(delay_ms, rep, c)| SweepPoint { delay_ms, rep, outcome: run(&c, "stage2").map_err(|e| e.to_string()) })
        .collect();
    let rows = delays
        .iter()
        .map(|&d| {
            let mine: Vec<&SweepPoint> = points.iter().filter(|p| p.delay_ms == d).collect();
            let ok: Vec<&RunOutput> = mine.iter().filter_map(|p| p.outcome.as_ref().ok()).collect();
            let failures: Vec<String> =
                mine.iter().filter_map(|p| p.outcome.as_ref().err().map(|e| format!("rep {}: {e}", p.rep))).collect();
            let mean = |f: &dyn Fn(&RunOutput) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|o| f(o)).sum::<f64>() / ok.len() as f64
                }
            };
            let cte = |o: &RunOutput, g: fn(&crate::stats::MetricSummary) -> f64| o.report.cte.as_ref().map_or(f64::NAN, g);
            SweepRow {
                delay_ms: d,
                cte_rmse_m: mean(&|o| cte(o, |m| m.rmse)),
                cte_mean_m: mean(&|o| cte(o, |m| m.mean)),
                cte_p95_m: mean(&|o| cte(o, |m| m.p95)),
                distance_m: mean(&|o| o.report.distance_m),
                completed: failures.is_empty() && ok.iter().all(|o| o.report.completed),
                runs: ok.len() as u32,
                failures,
            }
        })
        .collect();
    Ok(SweepResult { rows, points })
}
