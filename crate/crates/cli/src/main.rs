mod jobs;

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hilbench::orchestrator::config::{stage1_default, stage3_default, RunConfig};
use hilbench::orchestrator::report::{read_log_lenient, replay_report_with, write_report};
use hilbench::orchestrator::sweep::{cliff_fixture, SweepResult};
use hilbench::orchestrator::{run, run_sweep, write_artifacts, ConfigError, RunOutput, SweepConfig};
use hilbench::plant::{fit_fopdt, run_step_experiment, Channel, FopdtFit, StepLog};
use hilbench::registration::{benchmark_dataset, read_dataset_csv, run_ladder, split_indices, write_dataset_csv};
use jobs::{CalibrateConfig, DatasetSource, IdentifyConfig};
use log::info;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "hilbench", version, about = "Deterministic closed-loop HIL evaluation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file; the shipped preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "HILBENCH_OUT")]
    out: Option<PathBuf>,
    /// Seed override; takes precedence over the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Closed-loop baseline run.
    Stage1(Common),
    /// Added-delay sweep producing a response curve.
    Stage2(Common),
    /// Scripted-traffic run with safety metrics.
    Stage3(Common),
    /// Step-response FOPDT identification.
    Identify {
        #[command(flatten)]
        common: Common,
        /// Fit an existing step log (t_s,command,response) instead of simulating.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, requires = "log")]
        channel: Option<ChannelArg>,
    },
    /// Spatial registration ladder (raw, rigid, affine, hybrid).
    Calibrate(Common),
    /// Recompute a run's report from its audit log alone.
    ReplayReport {
        #[arg(long)]
        log: PathBuf,
        /// Write report.json here; prints to stdout when omitted.
        #[arg(long, env = "HILBENCH_OUT")]
        out: Option<PathBuf>,
    },
    /// Check a configuration file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Auto)]
        kind: Kind,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ChannelArg {
    Steering,
    Velocity,
}

impl From<ChannelArg> for Channel {
    fn from(c: ChannelArg) -> Self {
        match c {
            ChannelArg::Steering => Channel::Steering,
            ChannelArg::Velocity => Channel::Velocity,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Kind {
    Auto,
    Run,
    Sweep,
    Identify,
    Calibrate,
}

/// Marks errors that must exit with the configuration status.
#[derive(Debug)]
struct ConfigFailure(String);

impl fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_failure(e: ConfigError) -> anyhow::Error {
    ConfigFailure(e.to_string()).into()
}

const EXIT_CONFIG: u8 = 1;
const EXIT_ABORT: u8 = 2;

#[derive(Serialize)]
struct Artifact {
    path: String,
    /// Written by a run that did not finish normally.
    partial: bool,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    command: String,
    status: String,
    seed: Option<u64>,
    artifacts: Vec<Artifact>,
    notes: Vec<String>,
}

impl Manifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self { schema_version: 1, command: command.into(), status: "ok".into(), seed, artifacts: Vec::new(), notes: Vec::new() }
    }

    fn add(&mut self, path: impl Into<String>, partial: bool) {
        self.artifacts.push(Artifact { path: path.into(), partial });
    }

    fn write(&mut self, dir: &Path) -> Result<()> {
        self.add("manifest.json", false);
        let f = File::create(dir.join("manifest.json")).context("writing manifest.json")?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

fn out_dir(common: &Common, stage: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(stage));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn summarize(out: &RunOutput) {
    let r = &out.report;
    let cte = r.cte.as_ref().map_or("n/a".into(), |m| format!("mean {:.4} m, rmse {:.4} m, p95 {:.4} m", m.mean, m.rmse, m.p95));
    println!("{}: {} cycles, {:.2} s virtual", r.run_id, r.cycles, r.end_t_ns.as_secs_f64());
    println!("  CTE {cte}; distance {:.2} m; laps {:.2}; completed {}", r.distance_m, r.laps, r.completed);
    if let Some(t) = r.latency.iter().find(|c| c.component == "total") {
        println!("  total latency mean {:.2} ms, p95 {:.2} ms", t.stats.mean, t.stats.p95);
    }
    if let Some(s) = &r.safety {
        println!("  TTC min {:.3} s, D_min {:.3} m, {} events", s.ttc_min, s.d_min, s.events.len());
    }
    if r.aborted {
        println!("  ABORTED: {}", r.abort_reason.as_deref().unwrap_or("unknown"));
    }
}

fn closed_loop(stage: &str, common: &Common, default: fn(u64) -> RunConfig) -> Result<u8> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(config_failure)?,
        None => default(42),
    };
    let resolved = cfg.resolve_seeded(common.seed).map_err(config_failure)?;
    let dir = out_dir(common, stage)?;
    info!("{stage}: seed {}, output {}", resolved.seed, dir.display());
    let out = run(&resolved, stage)?;
    let files = write_artifacts(&dir, &out)?;
    let mut manifest = Manifest::new(stage, Some(resolved.seed));
    for f in files {
        manifest.add(f, out.report.aborted);
    }
    if out.report.aborted {
        manifest.status = "aborted".into();
        manifest.notes.extend(out.report.abort_reason.clone());
    }
    manifest.write(&dir)?;
    summarize(&out);
    Ok(if out.report.aborted { EXIT_ABORT } else { 0 })
}

fn stage2(common: &Common) -> Result<u8> {
    let cfg = match &common.config {
        Some(p) => SweepConfig::load(p).map_err(config_failure)?,
        None => cliff_fixture(),
    };
    let dir = out_dir(common, "stage2")?;
    let res = run_sweep(&cfg, common.seed).map_err(|e| match e {
        hilbench::orchestrator::OrchestratorError::Config(c) => config_failure(c),
        other => other.into(),
    })?;
    let mut manifest = Manifest::new("stage2", Some(common.seed.unwrap_or(cfg.base.seed)));
    let mut bad = false;
    for p in &res.points {
        let sub = SweepResult::point_dir(p.delay_ms, p.rep);
        match &p.outcome {
            Ok(out) => {
                let files = write_artifacts(&dir.join(&sub), out)?;
                for f in files {
                    manifest.add(sub.join(f).display().to_string(), out.report.aborted);
                }
                if out.report.aborted {
                    bad = true;
                    manifest.notes.push(format!("{}: aborted: {}", sub.display(), out.report.abort_reason.as_deref().unwrap_or("")));
                }
            }
            Err(e) => {
                bad = true;
                manifest.notes.push(format!("{}: failed: {e}", sub.display()));
            }
        }
    }
    let f = File::create(dir.join("response_curve.csv")).context("writing response_curve.csv")?;
    res.write_csv(BufWriter::new(f))?;
    manifest.add("response_curve.csv", bad);
    write_json(&dir.join("sweep.json"), &res.rows)?;
    manifest.add("sweep.json", bad);
    if bad {
        manifest.status = "aborted".into();
    }
    manifest.write(&dir)?;
    println!("{:>9} {:>10} {:>10} {:>10} {:>10} {:>9}", "delay_ms", "cte_rmse", "cte_mean", "cte_p95", "distance", "completed");
    for r in &res.rows {
        println!(
            "{:>9} {:>10.4} {:>10.4} {:>10.4} {:>10.2} {:>9}",
            r.delay_ms, r.cte_rmse_m, r.cte_mean_m, r.cte_p95_m, r.distance_m, r.completed
        );
    }
    match res.cliff_ms() {
        Some(c) => println!("completion lost from {c} ms"),
        None => println!("no completion cliff in range"),
    }
    Ok(if bad { EXIT_ABORT } else { 0 })
}

#[derive(Serialize)]
struct ChannelFit {
    channel: Channel,
    #[serde(flatten)]
    fit: FopdtFit,
}

fn print_fit(f: &ChannelFit) {
    let p = f.fit.params;
    println!(
        "{:?}: K {:.4}, tau_p {:.4} s, L {:.4} s, t90 {:.4} s, R2 {:.4}",
        f.channel, p.gain, p.tau_p, p.dead_time, f.fit.t90, f.fit.r2
    );
}

fn identify(common: &Common, log: Option<&Path>, channel: Option<ChannelArg>) -> Result<u8> {
    let dir = out_dir(common, "identify")?;
    let mut manifest = Manifest::new("identify", common.seed);
    let mut fits = Vec::new();
    if let Some(path) = log {
        let channel: Channel = channel.unwrap_or(ChannelArg::Steering).into();
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let step = StepLog::read_csv(channel, f)?;
        fits.push(ChannelFit { channel, fit: fit_fopdt(&step)? });
    } else {
        let mut cfg = match &common.config {
            Some(p) => IdentifyConfig::load(p).map_err(config_failure)?,
            None => IdentifyConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let plant = cfg.plant_config().map_err(config_failure)?;
        manifest.seed = Some(cfg.seed);
        for &channel in &cfg.channels {
            let gain = match channel {
                Channel::Steering => plant.steering.gain,
                Channel::Velocity => plant.velocity.gain,
            };
            let noise = cfg.noise_fraction * (gain * cfg.amplitude).abs();
            let step = run_step_experiment(&plant, channel, cfg.amplitude, cfg.duration_s, noise, cfg.seed)
                .map_err(|e| config_failure(ConfigError::invalid("identify", e.to_string())))?;
            let name = format!("step_{}.csv", serde_json::to_value(channel)?.as_str().unwrap_or("channel"));
            step.write_csv(BufWriter::new(File::create(dir.join(&name))?))?;
            manifest.add(name, false);
            fits.push(ChannelFit { channel, fit: fit_fopdt(&step)? });
        }
    }
    write_json(&dir.join("fopdt.json"), &fits)?;
    manifest.add("fopdt.json", false);
    manifest.write(&dir)?;
    fits.iter().for_each(print_fit);
    Ok(0)
}

fn calibrate(common: &Common) -> Result<u8> {
    let mut cfg = match &common.config {
        Some(p) => CalibrateConfig::load(p).map_err(config_failure)?,
        None => CalibrateConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let dir = out_dir(common, "calibrate")?;
    let mut manifest = Manifest::new("calibrate", Some(cfg.seed));
    let pairs = match &cfg.dataset {
        DatasetSource::Benchmark => {
            let pairs = benchmark_dataset(cfg.seed);
            write_dataset_csv(BufWriter::new(File::create(dir.join("dataset.csv"))?), &pairs)?;
            manifest.add("dataset.csv", false);
            pairs
        }
        DatasetSource::File { file } => {
            let f = File::open(file).map_err(|e| config_failure(ConfigError::Io(file.display().to_string(), e.to_string())))?;
            read_dataset_csv(f)?
        }
    };
    if pairs.len() < 10 {
        bail!(ConfigFailure(format!("dataset has {} pairs; at least 10 are needed", pairs.len())));
    }
    let (train, test) = split_indices(pairs.len(), cfg.train_fraction, cfg.seed);
    info!("calibrate: {} pairs, {} train / {} test", pairs.len(), train.len(), test.len());
    let (ladder, model) = run_ladder(&pairs, &train, &test, &cfg.hyper())?;
    write_json(&dir.join("ladder.json"), &ladder)?;
    manifest.add("ladder.json", false);
    model.save(&dir.join("model.json"))?;
    manifest.add("model.json", false);
    manifest.write(&dir)?;
    println!("{:>8} {:>12} {:>12} {:>12}", "model", "rmse_m", "mean_m", "p95_m");
    for (name, m) in [("raw", &ladder.raw), ("rigid", &ladder.rigid), ("affine", &ladder.affine), ("hybrid", &ladder.hybrid)] {
        println!("{name:>8} {:>12.6} {:>12.6} {:>12.6}", m.rmse, m.mean, m.p95);
    }
    println!("hybrid vs rigid: {:.1}% lower RMSE", 100.0 * (1.0 - ladder.hybrid.rmse / ladder.rigid.rmse));
    Ok(0)
}

fn replay(log: &Path, out: Option<&Path>) -> Result<u8> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let (audit, gaps) = read_log_lenient(&text)?;
    let report = replay_report_with(&audit, gaps)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_report(BufWriter::new(File::create(dir.join("report.json"))?), &report)?;
            let mut manifest = Manifest::new("replay-report", Some(report.seed));
            manifest.add("report.json", report.truncated);
            if report.truncated {
                manifest.status = "partial".into();
                manifest.notes.extend(report.gaps.iter().cloned());
            }
            manifest.write(dir)?;
        }
        None => write_report(std::io::stdout().lock(), &report)?,
    }
    if report.truncated {
        eprintln!("warning: log is truncated; report covers {} recorded cycles", report.cycles);
    }
    Ok(0)
}

fn detect_kind(text: &str) -> Kind {
    let v: serde_json::Value = serde_json::from_str(text).unwrap_or_default();
    if v.get("delays_ms").is_some() {
        Kind::Sweep
    } else if v.get("dataset").is_some() {
        Kind::Calibrate
    } else if v.get("amplitude").is_some() {
        Kind::Identify
    } else {
        Kind::Run
    }
}

fn validate_config(path: &Path, kind: Kind) -> Result<u8> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_failure(ConfigError::Io(path.display().to_string(), e.to_string())))?;
    let kind = if kind == Kind::Auto { detect_kind(&text) } else { kind };
    match kind {
        Kind::Run | Kind::Auto => {
            RunConfig::load(path).and_then(|c| c.resolve()).map_err(config_failure)?;
        }
        Kind::Sweep => {
            let s = SweepConfig::load(path).map_err(config_failure)?;
            s.resolve_point(s.delays_ms[0], 0, None).map_err(config_failure)?;
        }
        Kind::Identify => {
            IdentifyConfig::load(path).map_err(config_failure)?;
        }
        Kind::Calibrate => {
            CalibrateConfig::load(path).map_err(config_failure)?;
        }
    }
    println!("{}: valid {kind:?} configuration", path.display());
    Ok(0)
}

fn execute(cli: &Cli) -> Result<u8> {
    match &cli.cmd {
        Cmd::Stage1(c) => closed_loop("stage1", c, stage1_default),
        Cmd::Stage2(c) => stage2(c),
        Cmd::Stage3(c) => closed_loop("stage3", c, stage3_default),
        Cmd::Identify { common, log, channel } => identify(common, log.as_deref(), *channel),
        Cmd::Calibrate(c) => calibrate(c),
        Cmd::ReplayReport { log, out } => replay(log, out.as_deref()),
        Cmd::ValidateConfig { config, kind } => validate_config(config, *kind),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigFailure>() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_ABORT)
            }
        }
    }
}
