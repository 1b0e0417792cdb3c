//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hilbench::geometry::Vec2;
use hilbench::orchestrator::config::{stage1_default, RunConfig, Termination};
use hilbench::orchestrator::report::safety_trace;
use hilbench::orchestrator::sweep::cliff_fixture;
use hilbench::orchestrator::{replay_report, run, run_sweep};
use hilbench::plant::{fit_fopdt, run_step_experiment, Channel, PlantConfig};
use hilbench::registration::{benchmark_dataset, run_ladder, split_indices, MlpHyper, BENCHMARK_PAIRS};
use hilbench::safety::{ttc_body, AgentState, EventKind, Metric};
use hilbench::spatial::ReferencePath;
use hilbench::temporal::{assemble_all, Component, LatencyRecord};
use hilbench::timebase::TimestampNs;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn default_records() -> Result<Vec<LatencyRecord>, String> {
    let mut cfg = stage1_default(42);
    cfg.termination = Termination::Duration { seconds: 40.0 };
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    let out = run(&cfg, "stage1").map_err(|e| e.to_string())?;
    let (records, errors) = assemble_all(out.log.events());
    check(errors.is_empty(), format!("{} cycles failed to assemble", errors.len()))?;
    Ok(records)
}

fn latency_identity() -> Outcome {
    let start = Instant::now();
    let records = default_records()?;
    let elapsed = start.elapsed();
    check(records.len() >= 2000, format!("only {} cycles", records.len()))?;
    let bad = records
        .iter()
        .filter(|r| {
            r.dt_r2v != r.dt_ingest + r.dt_adv + r.dt_sense
                || r.dt_platform != r.dt_v2r + r.dt_r2v
                || r.dt_total != r.dt_sut + r.dt_platform
        })
        .count();
    check(bad == 0, format!("{bad} of {} records violate the identities", records.len()))?;
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!("{} records exact, {:.2?}", records.len(), elapsed))
}

fn mean_cv(records: &[LatencyRecord], c: Component) -> (f64, f64) {
    let v: Vec<f64> = records.iter().map(|r| c.of(r) as f64 * 1e-6).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean)
}

fn latency_character() -> Outcome {
    let records = default_records()?;
    let (r2v, cv_r2v) = mean_cv(&records, Component::R2v);
    let (v2r, cv_v2r) = mean_cv(&records, Component::V2r);
    let (_, cv_adv) = mean_cv(&records, Component::Adv);
    let (_, cv_sense) = mean_cv(&records, Component::Sense);
    check((r2v / 36.58 - 1.0).abs() <= 0.10, format!("R2V mean {r2v:.2} ms"))?;
    check((v2r / 8.58 - 1.0).abs() <= 0.10, format!("V2R mean {v2r:.2} ms"))?;
    check(cv_v2r < 0.3, format!("CV(V2R) {cv_v2r:.3}"))?;
    check(cv_r2v > 0.45, format!("CV(R2V) {cv_r2v:.3}"))?;
    check(
        cv_adv > cv_sense && cv_sense > cv_v2r,
        format!("CV ordering adv {cv_adv:.3}, sense {cv_sense:.3}, V2R {cv_v2r:.3}"),
    )?;
    Ok(format!(
        "R2V {r2v:.2} ms (CV {cv_r2v:.2}), V2R {v2r:.2} ms (CV {cv_v2r:.2}), CV adv {cv_adv:.2} > sense {cv_sense:.2}"
    ))
}

/// Brute-force distance from `p` to a polyline: `n` samples uniform in
/// arclength, then a ternary search around the best sample.
fn dense_distance(vertices: &[Vec2], closed: bool, p: Vec2, n: usize) -> (f64, f64) {
    let mut pts = vertices.to_vec();
    if closed {
        pts.push(vertices[0]);
    }
    let lens: Vec<f64> = pts.windows(2).map(|w| w[0].distance(w[1])).collect();
    let total: f64 = lens.iter().sum();
    let at = |s: f64| {
        let mut s = s.clamp(0.0, total);
        for (i, &l) in lens.iter().enumerate() {
            if s <= l || i == lens.len() - 1 {
                return pts[i].lerp(pts[i + 1], (s / l).min(1.0));
            }
            s -= l;
        }
        unreachable!()
    };
    let (mut seg, mut seg_start) = (0, 0.0);
    let (mut best, mut best_s) = (f64::INFINITY, 0.0);
    for k in 0..=n {
        let s = total * k as f64 / n as f64;
        while seg + 1 < lens.len() && s > seg_start + lens[seg] {
            seg_start += lens[seg];
            seg += 1;
        }
        let q = pts[seg].lerp(pts[seg + 1], ((s - seg_start) / lens[seg]).min(1.0));
        let d = q.distance(p);
        if d < best {
            best = d;
            best_s = s;
        }
    }
    let h = total / n as f64;
    let (mut lo, mut hi) = (best_s - h, best_s + h);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if at(m1).distance(p) < at(m2).distance(p) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    (best, best.min(at(0.5 * (lo + hi)).distance(p)))
}

fn projection_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = Vec::new();
    while cases.len() < 1000 {
        let n = rng.random_range(2..=12);
        let vertices: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
        let closed = n >= 3 && rng.random_bool(0.5);
        let p = Vec2::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0));
        if let Ok(path) = ReferencePath::new(vertices.clone(), closed) {
            cases.push((path, vertices, closed, p));
        }
    }
    let failures: Vec<String> = cases
        .par_iter()
        .filter_map(|(path, vertices, closed, p)| {
            let cte = path.cte(*p);
            let (sampled, refined) = dense_distance(vertices, *closed, *p, 1_000_000);
            if cte > sampled + 1e-12 {
                Some(format!("project worse than a dense sample: {cte} > {sampled}"))
            } else if (cte - refined).abs() > 1e-6 {
                Some(format!("cte {cte} vs oracle {refined}"))
            } else {
                None
            }
        })
        .collect();
    let elapsed = start.elapsed();
    check(failures.is_empty(), format!("{} of 1000 cases: {}", failures.len(), failures.first().cloned().unwrap_or_default()))?;
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("1000 cases within 1e-6 m, {elapsed:.2?}"))
}

fn fopdt_recovery() -> Outcome {
    let plant = PlantConfig::paper_uncalibrated();
    let mut lines = Vec::new();
    for (channel, params, t90) in [(Channel::Steering, plant.steering, 0.85), (Channel::Velocity, plant.velocity, 0.53)] {
        let amplitude = 0.5;
        let noise = 0.02 * (params.gain * amplitude).abs();
        let mut good_r2 = 0;
        let mut worst_t90: f64 = 0.0;
        for seed in 1..=20 {
            let log = run_step_experiment(&plant, channel, amplitude, 3.0, noise, seed).map_err(|e| e.to_string())?;
            let fit = fit_fopdt(&log).map_err(|e| e.to_string())?;
            if fit.r2 > 0.97 {
                good_r2 += 1;
            }
            worst_t90 = worst_t90.max((fit.t90 / t90 - 1.0).abs());
        }
        check(good_r2 >= 19, format!("{channel:?}: R2 > 0.97 in {good_r2}/20"))?;
        check(worst_t90 <= 0.05, format!("{channel:?}: t90 off by {:.1}%", 100.0 * worst_t90))?;
        lines.push(format!("{channel:?} R2 ok {good_r2}/20, t90 within {:.1}%", 100.0 * worst_t90));
    }
    Ok(lines.join("; "))
}

fn registration_ladder() -> Outcome {
    let start = Instant::now();
    let seed = 2024;
    let pairs = benchmark_dataset(seed);
    check(pairs.len() == BENCHMARK_PAIRS, format!("{} pairs", pairs.len()))?;
    let (train, test) = split_indices(pairs.len(), 0.8, seed);
    check(train.len() == 2746 && test.len() == 687, format!("split {}/{}", train.len(), test.len()))?;
    let hyper = MlpHyper { seed, ..MlpHyper::default() };
    let (ladder, _) = run_ladder(&pairs, &train, &test, &hyper).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (raw, rigid, affine, hybrid) = (ladder.raw.rmse, ladder.rigid.rmse, ladder.affine.rmse, ladder.hybrid.rmse);
    check(raw > rigid && rigid > affine && affine > hybrid, format!("RMSE {raw:.5} {rigid:.5} {affine:.5} {hybrid:.5}"))?;
    let gain = 1.0 - hybrid / rigid;
    check(gain >= 0.30, format!("hybrid improves on rigid by {:.1}%", 100.0 * gain))?;
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!(
        "RMSE raw {raw:.4} > rigid {rigid:.4} > affine {affine:.4} > hybrid {hybrid:.4} m, {:.1}% over rigid, {elapsed:.2?}",
        100.0 * gain
    ))
}

fn determinism() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("stage1.json")).map_err(|e| e.to_string())?.resolve().map_err(|e| e.to_string())?;
    let a = run(&cfg, "stage1").map_err(|e| e.to_string())?;
    let b = run(&cfg, "stage1").map_err(|e| e.to_string())?;
    let (la, lb) = (a.log.to_ndjson_string(), b.log.to_ndjson_string());
    check(la == lb, "audit logs differ")?;
    let replayed = replay_report(&a.log).map_err(|e| e.to_string())?;
    check(replayed == a.report, "replayed report differs")?;
    check(replayed.to_json_string() == a.report.to_json_string(), "replayed report serializes differently")?;
    Ok(format!("{} log bytes identical, replay bit-exact", la.len()))
}

fn cliff() -> Outcome {
    let start = Instant::now();
    let res = run_sweep(&cliff_fixture(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rows = &res.rows;
    let delays: Vec<f64> = rows.iter().map(|r| r.delay_ms).collect();
    check(delays == [0.0, 10.0, 20.0, 40.0, 60.0, 80.0], format!("delays {delays:?}"))?;
    let ratio = rows[5].cte_rmse_m / rows[0].cte_rmse_m;
    check(ratio >= 5.0, format!("RMSE(80)/RMSE(0) = {ratio:.2}"))?;
    let (k, jump) = (1..rows.len())
        .map(|i| (i, rows[i].cte_rmse_m / rows[i - 1].cte_rmse_m))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("six rows");
    check(jump >= 3.0, format!("largest adjacent ratio {jump:.2}"))?;
    let cliff_at = rows[k].delay_ms;
    check(rows[k..].iter().all(|r| !r.completed), format!("completion true at or above {cliff_at} ms"))?;
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("RMSE(80)/RMSE(0) = {ratio:.1}, jump x{jump:.2} at {cliff_at} ms, not completed from there, {elapsed:.2?}"))
}

fn stage3_accounting() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("stage3.json")).map_err(|e| e.to_string())?.resolve().map_err(|e| e.to_string())?;
    check(cfg.scenario.as_ref().is_some_and(|s| s.npcs.len() == 5), "scenario does not have 5 NPCs")?;
    let out = run(&cfg, "stage3").map_err(|e| e.to_string())?;
    let end = out.report.end_t_ns.as_secs_f64();
    check(end >= 90.0, format!("ran {end:.1} s"))?;
    let s = out.report.safety.as_ref().ok_or("report has no safety section")?;
    for m in [Metric::Ttc, Metric::Dmin] {
        let n = s.events.iter().filter(|e| e.kind == EventKind::GlobalMin && e.metric == m).count();
        check(n == 1, format!("{n} GlobalMin events for {m:?}"))?;
    }

    let ego_r = cfg.sut.params.ego_radius;
    let brute = out
        .gts
        .iter()
        .flat_map(|g| g.npcs.iter().map(move |n| (g.position.distance(n.position) - ego_r - n.radius).max(0.0)))
        .fold(f64::INFINITY, f64::min);
    check(brute == s.d_min, format!("D_min {} vs brute force {brute}", s.d_min))?;

    let ttc: Vec<(TimestampNs, f64)> = out
        .gts
        .iter()
        .map(|g| {
            let agent = |p, v, r| AgentState { id: String::new(), t: g.t, position: p, velocity: v, footprint_radius: r };
            let ego = agent(g.position, Vec2::from_polar(g.speed, g.heading), ego_r);
            let t = g.npcs.iter().map(|n| ttc_body(&ego, &agent(n.position, n.velocity, n.radius)).unwrap()).fold(f64::INFINITY, f64::min);
            (g.t, t)
        })
        .collect();
    let trace = safety_trace(&cfg, &out.gts).map_err(|e| e.to_string())?;
    check(trace.frames.len() == ttc.len() && trace.frames.iter().zip(&ttc).all(|(f, t)| f.ttc == t.1), "trace TTC differs from recomputation")?;
    let dips: Vec<TimestampNs> =
        (0..ttc.len()).filter(|&i| ttc[i].1 < 1.5 && (i == 0 || ttc[i - 1].1 >= 1.5)).map(|i| ttc[i].0).collect();
    check(!dips.is_empty(), "no TTC dip below 1.5 s")?;
    let crossings: Vec<TimestampNs> = s
        .events
        .iter()
        .filter(|e| e.kind == EventKind::ThresholdCross && e.metric == Metric::Ttc)
        .map(|e| e.t)
        .collect();
    check(dips.iter().all(|t| crossings.contains(t)), format!("dips at {dips:?}, crossings at {crossings:?}"))?;
    check(s.frames == ttc.len(), format!("trace has {} frames", s.frames))?;
    Ok(format!(
        "{end:.1} s, TTC min {:.3} s, D_min {:.4} m matches brute force, {} dips all flagged",
        s.ttc_min,
        s.d_min,
        dips.len()
    ))
}

fn stepped_ttc(a: &AgentState, b: &AgentState, dt: f64) -> f64 {
    let dp = b.position - a.position;
    let dv = b.velocity - a.velocity;
    let r = a.footprint_radius + b.footprint_radius;
    let closest = if dv.norm_sq() > 0.0 { (-dp.dot(dv) / dv.norm_sq()).max(0.0) } else { 0.0 };
    let mut k = 0u64;
    loop {
        let s = k as f64 * dt;
        if s > closest + dt {
            return f64::INFINITY;
        }
        if (dp + dv * s).norm() - r <= 0.0 {
            return s;
        }
        k += 1;
    }
}

fn ttc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut agent = |id: &str| AgentState {
        id: id.into(),
        t: TimestampNs(0),
        position: Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
        velocity: Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
        footprint_radius: rng.random_range(0.1..1.5),
    };
    let cases: Vec<(AgentState, AgentState)> = (0..500).map(|_| (agent("ego"), agent("npc"))).collect();
    let results: Vec<Result<bool, String>> = cases
        .par_iter()
        .map(|(a, b)| {
            let closed = ttc_body(a, b).map_err(|e| e.to_string())?;
            let stepped = stepped_ttc(a, b, 1e-4);
            if closed.is_finite() != stepped.is_finite() {
                return Err(format!("finiteness differs: {closed} vs {stepped}"));
            }
            if closed.is_finite() && (closed - stepped).abs() > 1e-3 {
                return Err(format!("{closed} vs {stepped}"));
            }
            Ok(closed.is_finite())
        })
        .collect();
    let finite = results.iter().filter(|r| matches!(r, Ok(true))).count();
    if let Some(Err(e)) = results.iter().find(|r| r.is_err()) {
        return Err(e.clone());
    }
    check(finite > 0, "no finite encounters generated")?;
    Ok(format!("500 encounters agree, {finite} finite"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("latency identity", latency_identity),
        ("latency character", latency_character),
        ("projection oracle", projection_oracle),
        ("FOPDT recovery", fopdt_recovery),
        ("registration ladder", registration_ladder),
        ("stage-1 determinism and replay", determinism),
        ("stage-2 cliff", cliff),
        ("stage-3 safety accounting", stage3_accounting),
        ("TTC oracle", ttc_oracle),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
