//! Run configuration: the user-facing document, presets, and the fully
//! resolved form echoed into every audit log header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::ScenarioScript;
use super::ConfigError;
use crate::geometry::Vec2;
use crate::links::{PerturbationConfig, R2vConfig, StageLatencyModel, V2rConfig};
use crate::plant::PlantConfig;
use crate::safety::EventConfig;
use crate::spatial::{PathDoc, ReferencePath};
use crate::sut::{PurePursuitParams, SutLatencyModel};


pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Termination {
    /// Stop sampling after `seconds` of virtual time.
    Duration { seconds: f64 },
    /// Stop once the ego has covered `laps` path lengths (or reached the end
    /// of an open path), or after `max_seconds`.
    Laps { laps: f64, max_seconds: f64 },
}

impl Termination {
    pub fn horizon_s(&self) -> f64 {
        match *self {
            Termination::Duration { seconds } => seconds,
            Termination::Laps { max_seconds, .. } => max_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSource {
    Builtin { name: String },
    /// Relative paths resolve against the config file's directory.
    File { file: PathBuf },
    Inline { closed: bool, vertices: Vec<Vec2> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksConfig {
    #[serde(default = "default_link_preset")]
    pub preset: String,
    #[serde(default)]
    pub r2v: Option<R2vConfig>,
    #[serde(default)]
    pub v2r: Option<V2rConfig>,
    /// Overrides the V2R perturbation of the preset or explicit V2R config.
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
}

fn default_link_preset() -> String {
    "characterized".into()
}

impl Default for LinksConfig {
    fn default() -> Self {
        Self { preset: default_link_preset(), r2v: None, v2r: None, perturbation: None }
    }
}

/// Link presets: `characterized` (measured distributions), `constant-mean`
/// (every stage fixed at its characterized mean) and `ideal` (zero latency).
pub fn link_preset(name: &str) -> Option<(R2vConfig, V2rConfig)> {
    match name {
        "characterized" => Some((R2vConfig::characterized(), V2rConfig::characterized())),
        "constant-mean" => Some((
            R2vConfig::constant(0.26, 28.68, 7.64),
            V2rConfig { base_latency: StageLatencyModel::constant(8.58), perturbation: PerturbationConfig::none() },
        )),
        "ideal" => Some((
            R2vConfig::constant(0.0, 0.0, 0.0),
            V2rConfig { base_latency: StageLatencyModel::constant(0.0), perturbation: PerturbationConfig::none() },
        )),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SutConfig {
    #[serde(default = "default_sut")]
    pub name: String,
    #[serde(default = "default_latency_preset")]
    pub latency_preset: String,
    #[serde(default)]
    pub latency: Option<SutLatencyModel>,
    /// Pure-pursuit parameters; `wheelbase` is always taken from the plant.
    #[serde(default)]
    pub params: Option<PurePursuitParams>,
    #[serde(default = "default_goal_speed")]
    pub goal_speed: f64,
}

fn default_sut() -> String {
    "pure-pursuit".into()
}
fn default_latency_preset() -> String {
    "constant-15.48".into()
}
fn default_goal_speed() -> f64 {
    0.5
}

impl Default for SutConfig {
    fn default() -> Self {
        Self {
            name: default_sut(),
            latency_preset: default_latency_preset(),
            latency: None,
            params: None,
            goal_speed: default_goal_speed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    Builtin { name: String },
    File { file: PathBuf },
    Inline { script: ScenarioScript },
}

/// The run configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub seed: u64,
    pub termination: Termination,
    pub path: PathSource,
    #[serde(default)]
    pub start: Option<StartPose>,
    #[serde(default = "default_plant_preset")]
    pub plant_preset: String,
    #[serde(default)]
    pub plant: Option<PlantConfig>,
    #[serde(default)]
    pub links: LinksConfig,
    #[serde(default)]
    pub sut: SutConfig,
    #[serde(default = "default_watchdog")]
    pub watchdog_periods: u32,
    #[serde(default = "default_departure")]
    pub departure_limit_m: f64,
    #[serde(default)]
    pub events: EventConfig,
    #[serde(default)]
    pub scenario: Option<ScenarioSource>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}
fn default_plant_preset() -> String {
    "calibrated".into()
}
fn default_watchdog() -> u32 {
    10
}
fn default_departure() -> f64 {
    0.5
}

/// Parse a JSON document, reporting the field path and position of the
/// first error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let (line, column) = (inner.line(), inner.column());
        let full = inner.to_string();
        let msg = full.strip_suffix(&format!(" at line {line} column {column}")).unwrap_or(&full).to_string();
        ConfigError::Parse { path, line, column, msg }
    })
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        parse_json(text)
    }

    /// Load and make relative file references absolute against the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_json_str(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, dir: &Path) {
        if let PathSource::File { file } = &mut self.path {
            if file.is_relative() {
                *file = dir.join(&*file);
            }
        }
        if let Some(ScenarioSource::File { file }) = &mut self.scenario {
            if file.is_relative() {
                *file = dir.join(&*file);
            }
        }
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        self.resolve_seeded(None)
    }

    /// Resolve with an optional seed override; the config's own seed is
    /// kept alongside as `config_seed`.
    pub fn resolve_seeded(&self, seed_override: Option<u64>) -> Result<ResolvedConfig, ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::invalid("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        let path = match &self.path {
            PathSource::Builtin { name } => {
                builtin_path(name).ok_or_else(|| ConfigError::invalid("path.name", format!("unknown builtin path `{name}`")))?
            }
            PathSource::File { file } => {
                let text = std::fs::read_to_string(file).map_err(|e| ConfigError::Io(file.display().to_string(), e.to_string()))?;
                parse_json::<PathDoc>(&text).map_err(|e| e.within("path.file"))?
            }
            PathSource::Inline { closed, vertices } => PathDoc { closed: *closed, vertices: vertices.clone() },
        };
        let route = ReferencePath::try_from(path.clone()).map_err(|e| ConfigError::invalid("path", e.to_string()))?;
        let start = self.start.unwrap_or_else(|| {
            let p = route.point_at(0.0);
            StartPose { x: p.x, y: p.y, heading: route.heading_at(0.0) }
        });
        let plant = match &self.plant {
            Some(p) => p.clone(),
            None => PlantConfig::preset(&self.plant_preset).map_err(|e| ConfigError::invalid("plant_preset", e.to_string()))?,
        };
        let (mut r2v, mut v2r) = link_preset(&self.links.preset)
            .ok_or_else(|| ConfigError::invalid("links.preset", format!("unknown link preset `{}`", self.links.preset)))?;
        if let Some(r) = &self.links.r2v {
            r2v = r.clone();
        }
        if let Some(v) = &self.links.v2r {
            v2r = v.clone();
        }
        if let Some(p) = &self.links.perturbation {
            v2r.perturbation = p.clone();
        }
        let latency = match &self.sut.latency {
            Some(l) => l.clone(),
            None => SutLatencyModel::preset(&self.sut.latency_preset)
                .map_err(|e| ConfigError::invalid("sut.latency_preset", e.to_string()))?,
        };
        let mut params = self.sut.params.unwrap_or_default();
        params.wheelbase = plant.wheelbase;
        let scenario = match &self.scenario {
            None => None,
            Some(ScenarioSource::Builtin { name }) => Some(
                super::scenario::builtin_scenario(name)
                    .ok_or_else(|| ConfigError::invalid("scenario.name", format!("unknown builtin scenario `{name}`")))?,
            ),
            Some(ScenarioSource::File { file }) => {
                let text = std::fs::read_to_string(file).map_err(|e| ConfigError::Io(file.display().to_string(), e.to_string()))?;
                Some(parse_json::<ScenarioScript>(&text).map_err(|e| e.within("scenario.file"))?)
            }
            Some(ScenarioSource::Inline { script }) => Some(script.clone()),
        };
        let resolved = ResolvedConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: seed_override.unwrap_or(self.seed),
            config_seed: self.seed,
            termination: self.termination,
            path,
            start,
            plant,
            r2v,
            v2r,
            sut: ResolvedSut { name: self.sut.name.clone(), latency, params, goal_speed: self.sut.goal_speed },
            watchdog_periods: self.watchdog_periods,
            departure_limit_m: self.departure_limit_m,
            events: self.events,
            scenario,
        };
        resolved.validate()?;
        Ok(resolved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedSut {
    pub name: String,
    pub latency: SutLatencyModel,
    pub params: PurePursuitParams,
    pub goal_speed: f64,
}

/// Every parameter of a run made explicit. This is what the audit log
/// header carries and what replay reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub schema_version: u32,
    /// Seed the run used.
    pub seed: u64,
    /// Seed written in the configuration; differs from `seed` under an
    /// override or in a sweep.
    pub config_seed: u64,
    pub termination: Termination,
    pub path: PathDoc,
    pub start: StartPose,
    pub plant: PlantConfig,
    pub r2v: R2vConfig,
    pub v2r: V2rConfig,
    pub sut: ResolvedSut,
    pub watchdog_periods: u32,
    pub departure_limit_m: f64,
    pub events: EventConfig,
    pub scenario: Option<ScenarioScript>,
}

impl ResolvedConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.termination {
            Termination::Duration { seconds } if !(seconds.is_finite() && seconds > 0.0) => {
                return Err(ConfigError::invalid("termination.seconds", "duration must be > 0"));
            }
            Termination::Laps { laps, max_seconds } if !(laps > 0.0 && max_seconds.is_finite() && max_seconds > 0.0) => {
                return Err(ConfigError::invalid("termination", "laps and max_seconds must be > 0"));
            }
            _ => {}
        }
        ReferencePath::try_from(self.path.clone()).map_err(|e| ConfigError::invalid("path", e.to_string()))?;
        if ![self.start.x, self.start.y, self.start.heading].iter().all(|v| v.is_finite()) {
            return Err(ConfigError::invalid("start", "start pose must be finite"));
        }
        self.plant.validate().map_err(|e| ConfigError::invalid("plant", e.to_string()))?;
        self.r2v.validate().map_err(|e| ConfigError::invalid("links.r2v", e.to_string()))?;
        self.v2r.validate().map_err(|e| ConfigError::invalid("links.v2r", e.to_string()))?;
        self.sut.latency.validate().map_err(|e| ConfigError::invalid("sut.latency", e.to_string()))?;
        self.sut.params.validate().map_err(|e| ConfigError::invalid("sut.params", e.to_string()))?;
        crate::sut::sut_by_name(&self.sut.name, self.sut.params).map_err(|e| ConfigError::invalid("sut.name", e.to_string()))?;
        if !(self.sut.goal_speed.is_finite() && self.sut.goal_speed >= 0.0) {
            return Err(ConfigError::invalid("sut.goal_speed", "must be >= 0"));
        }
        if self.watchdog_periods == 0 {
            return Err(ConfigError::invalid("watchdog_periods", "must be >= 1"));
        }
        if !(self.departure_limit_m > 0.0) {
            return Err(ConfigError::invalid("departure_limit_m", "must be > 0"));
        }
        let ev = &self.events;
        if ![ev.ttc_threshold, ev.ttc_prominence, ev.dmin_prominence, ev.min_separation_s].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(ConfigError::invalid("events", "thresholds must be finite and >= 0"));
        }
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| ConfigError::invalid("scenario", e))?;
        }
        Ok(())
    }

    pub fn route(&self) -> ReferencePath {
        ReferencePath::try_from(self.path.clone()).expect("validated")
    }
}

/// Built-in circuits inside the 4.2 m tracked workspace: `square` (3 m
/// sides, sharp corners) and `stadium` (1.8 m straights joined by 1.2 m
/// radius half circles) and `circle` (1.8 m radius, 96 vertices).
pub fn builtin_path(name: &str) -> Option<PathDoc> {
    let v = |x: f64, y: f64| Vec2::new(x, y);
    match name {
        "square" => Some(PathDoc { closed: true, vertices: vec![v(0.6, 0.6), v(3.6, 0.6), v(3.6, 3.6), v(0.6, 3.6)] }),
        "stadium" => {
            const ARC: usize = 32;
            let (r, cy) = (1.2, 2.1);
            let mut pts = Vec::with_capacity(2 * ARC + 2);
            for (cx, a0) in [(3.0, -std::f64::consts::FRAC_PI_2), (1.2, std::f64::consts::FRAC_PI_2)] {
                for k in 0..=ARC {
                    let a = a0 + std::f64::consts::PI * k as f64 / ARC as f64;
                    pts.push(Vec2::new(cx + r * a.cos(), cy + r * a.sin()));
                }
            }
            Some(PathDoc { closed: true, vertices: pts })
        }
        "circle" => {
            const N: usize = 96;
            let pts = (0..N)
                .map(|k| {
                    let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * k as f64 / N as f64;
                    Vec2::new(2.1 + 1.8 * a.cos(), 2.1 + 1.8 * a.sin())
                })
                .collect();
            Some(PathDoc { closed: true, vertices: pts })
        }
        _ => None,
    }
}

/// The shipped Stage-1 baseline: reference SUT, calibrated plant,
/// characterized links, two laps of the square circuit.
pub fn stage1_default(seed: u64) -> RunConfig {
    RunConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        seed,
        termination: Termination::Laps { laps: 2.0, max_seconds: 120.0 },
        path: PathSource::Builtin { name: "square".into() },
        start: None,
        plant_preset: default_plant_preset(),
        plant: None,
        links: LinksConfig::default(),
        sut: SutConfig::default(),
        watchdog_periods: default_watchdog(),
        departure_limit_m: default_departure(),
        events: EventConfig::default(),
        scenario: None,
        output_dir: None,
    }
}

/// The shipped Stage-3 run: the square circuit with the five-NPC crossing
/// script for 95 s. The SUT yields on a 1 s horizon so interactions get
/// close enough to exercise the TTC alert threshold.
pub fn stage3_default(seed: u64) -> RunConfig {
    let mut cfg = stage1_default(seed);
    cfg.termination = Termination::Duration { seconds: 95.0 };
    cfg.scenario = Some(ScenarioSource::Builtin { name: "square-crossings".into() });
    cfg.sut.params = Some(PurePursuitParams { t_h: 1.0, d_stop: 0.2, ..PurePursuitParams::default() });
    cfg
}
