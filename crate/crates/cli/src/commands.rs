use std::path::{Path, PathBuf};

use serde_json::json;
use telesync_core::model::{Pose, Tick, TraceWindow};
use telesync_core::pipeline::{
    run_episode, HorizonPolicy, Pacer, PolicySpec, Recorded, Scenario, SourceSpec, TrajectorySource,
};
use telesync_core::rl::{self, best_of, evaluate_policy, sweep_fixed, train_two_step, write_curve, LiveFeed, RlError};

use crate::live::{check_url, probe_gateway, WsFeed};
use crate::output::{self, Manifest};
use crate::{CliError, Common, EvalArgs, RecordArgs, ReplayArgs, RunArgs, SweepArgs, TrainArgs};

fn load_scenario(c: &Common) -> Result<Scenario, CliError> {
    let mut sc = match &c.scenario {
        Some(p) => Scenario::load(p).map_err(CliError::invalid)?,
        None => Scenario::default(),
    };
    if let Some(seed) = c.seed {
        sc.seed = seed;
    }
    sc.validate().map_err(CliError::invalid)?;
    Ok(sc)
}

fn home_pose(sc: &Scenario) -> Result<Pose, CliError> {
    let chain = sc.chain().map_err(CliError::invalid)?;
    chain.forward_kinematics(&chain.home()).map_err(CliError::invalid)
}

fn load_policy(text: &str, sc: &Scenario) -> Result<(PolicySpec, Box<dyn HorizonPolicy>), CliError> {
    let spec: PolicySpec = text.parse().map_err(CliError::invalid)?;
    let policy = rl::build_policy(&spec, sc).map_err(CliError::invalid)?;
    Ok((spec, policy))
}

fn build_source(sc: &Scenario) -> Result<Box<dyn TrajectorySource>, CliError> {
    sc.source
        .build(&home_pose(sc)?, sc.seed, None)
        .map_err(CliError::invalid)
}

/// Runs one episode and writes logs, summary, latency table and provenance.
fn episode(
    command: &'static str,
    common: &Common,
    sc: &Scenario,
    recorded_as: &Scenario,
    policy_text: &str,
    source: Box<dyn TrajectorySource>,
) -> Result<(), CliError> {
    let (spec, mut policy) = load_policy(policy_text, sc)?;
    let mut manifest = Manifest::new(command, common.scenario.as_deref(), sc.seed);
    manifest.policy = Some(spec.to_string());
    output::write_provenance(&common.out, recorded_as, &manifest)?;

    let log = run_episode(sc, policy.as_mut(), source)?;
    let summary = log.export(&common.out)?;
    let rows = output::latency_breakdown(&log);
    output::write_breakdown(&common.out, &rows)?;
    output::print_breakdown(&rows);
    output::print_summary(&summary);
    println!("wrote {}", common.out.display());
    Ok(())
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.common)?;
    let source = build_source(&sc)?;
    episode("run", &a.common, &sc, &sc, &a.policy, source)
}

pub fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let mut sc = load_scenario(&a.common)?;
    let trace = Recorded::load(&a.trace).map_err(CliError::invalid)?;
    sc.source = SourceSpec::Recorded { path: a.trace.clone() };
    // the output directory keeps its own copy of the trace
    std::fs::create_dir_all(&a.common.out)?;
    let copy = "input_trace.csv";
    std::fs::copy(&a.trace, a.common.out.join(copy))?;
    let recorded_as = Scenario {
        source: SourceSpec::Recorded { path: copy.into() },
        ..sc.clone()
    };
    episode("replay", &a.common, &sc, &recorded_as, &a.policy, Box::new(trace))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.common)?;
    if a.episodes == 0 {
        return Err(CliError::Validation("--episodes must be positive".into()));
    }
    if matches!(sc.source, SourceSpec::Live) {
        return Err(CliError::Validation(
            "evaluation needs a recorded or synthetic source".into(),
        ));
    }
    let (spec, mut policy) = load_policy(&a.policy, &sc)?;
    let mut manifest = Manifest::new("eval", a.common.scenario.as_deref(), sc.seed);
    manifest.policy = Some(spec.to_string());
    manifest.settings = json!({ "episodes": a.episodes });
    output::write_provenance(&a.common.out, &sc, &manifest)?;

    let ev = evaluate_policy(&sc, policy.as_mut(), a.episodes)?;
    write_curve(&a.common.out.join("eval.csv"), &ev.rows)?;
    println!(
        "{spec}: mean reward {:.6} over {} episodes",
        ev.mean_reward,
        ev.rows.len()
    );
    Ok(())
}

/// Inclusive horizon range in ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HorizonRange {
    pub start: Tick,
    pub end: Tick,
}

/// Parses `a..b` or `a..=b`; both mean the closed range `[a, b]`.
pub fn parse_range(s: &str) -> Result<HorizonRange, CliError> {
    let bad = || CliError::Validation(format!("range `{s}` is not of the form a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let start: Tick = a.trim().parse().map_err(|_| bad())?;
    let end: Tick = b.trim().parse().map_err(|_| bad())?;
    if start > end {
        return Err(CliError::Validation(format!("range `{s}` is empty")));
    }
    Ok(HorizonRange { start, end })
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.common)?;
    let r = parse_range(&a.range)?;
    let h_max = sc.horizons.h_r_max.min(sc.horizons.h_c_max);
    if r.end > h_max {
        return Err(CliError::Validation(format!(
            "range end {} exceeds the horizon bound {h_max}",
            r.end
        )));
    }
    if a.step == 0 || a.episodes == 0 {
        return Err(CliError::Validation("--step and --episodes must be positive".into()));
    }
    if matches!(sc.source, SourceSpec::Live) {
        return Err(CliError::Validation(
            "a sweep needs a recorded or synthetic source".into(),
        ));
    }
    let mut manifest = Manifest::new("sweep", a.common.scenario.as_deref(), sc.seed);
    manifest.settings = json!({ "range": [r.start, r.end], "step": a.step, "episodes": a.episodes });
    output::write_provenance(&a.common.out, &sc, &manifest)?;

    let points = sweep_fixed(&sc, (r.start..=r.end).step_by(a.step as usize), a.episodes)?;
    let mut w = output::csv_writer(&a.common.out.join("sweep.csv"))?;
    w.write_record(["horizon", "reward", "rmse_p_om", "rmse_p_mr", "rmse_o_om", "rmse_o_mr"])
        .map_err(CliError::runtime)?;
    for p in &points {
        let m = p.mean_row();
        let row = [m.mean_reward, m.rmse_p_om, m.rmse_p_mr, m.rmse_o_om, m.rmse_o_mr].map(|v| v.to_string());
        w.write_record(std::iter::once(p.horizon.to_string()).chain(row))
            .map_err(CliError::runtime)?;
    }
    w.flush()?;
    let best = best_of(&points).expect("range is not empty");
    let best_json = json!({ "horizon": best.horizon, "reward": best.eval.mean_reward });
    std::fs::write(a.common.out.join("best.json"), format!("{best_json:#}\n"))?;
    println!(
        "best fixed horizon {} ms, mean reward {:.6}",
        best.horizon, best.eval.mean_reward
    );
    Ok(())
}

fn recorded_set(sc: &Scenario, traces: &[PathBuf]) -> Result<Vec<SourceSpec>, CliError> {
    if traces.is_empty() {
        if matches!(sc.source, SourceSpec::Live) {
            return Err(CliError::Validation(
                "the recorded phase needs a recorded or synthetic source; pass --trace".into(),
            ));
        }
        return Ok(vec![sc.source.clone()]);
    }
    traces
        .iter()
        .map(|p| {
            Recorded::load(p).map_err(CliError::invalid)?;
            Ok(SourceSpec::Recorded { path: p.clone() })
        })
        .collect()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.common)?;
    let mut cfg = sc.ppo.clone();
    if let Some(n) = a.episodes {
        cfg.episodes = n;
    }
    if let Some(ms) = a.episode_ms {
        cfg.episode_ms = ms;
    }
    if let Some(n) = a.hitl_episodes {
        cfg.hitl_episodes = n;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    cfg.validate().map_err(CliError::Validation)?;
    let recorded = recorded_set(&sc, &a.traces)?;
    let mut feed = match &a.live {
        Some(url) => {
            check_url(url)?;
            probe_gateway(url)?;
            Some(WsFeed::new(url.clone(), home_pose(&sc)?))
        }
        None => None,
    };

    let train_sc = Scenario { ppo: cfg.clone(), ..sc };
    let mut manifest = Manifest::new("train", a.common.scenario.as_deref(), train_sc.seed);
    manifest.settings = json!({
        "traces": a.traces,
        "live": a.live,
    });
    output::write_provenance(&a.common.out, &train_sc, &manifest)?;

    let live = feed.as_mut().map(|f| f as &mut dyn LiveFeed);
    let outcome = train_two_step(&train_sc, &cfg, &recorded, live, Some(&a.common.out)).map_err(|e| match e {
        RlError::Diverged(why) => CliError::Runtime(format!(
            "training diverged ({why}); the last good checkpoint is kept in {}",
            a.common.out.display()
        )),
        other => other.into(),
    })?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.mean_reward);
    println!(
        "trained {} episodes ({} live discarded), final mean reward {:.6}",
        outcome.curve.len(),
        outcome.discarded,
        last
    );
    if let Some(ep) = outcome.plateau_at {
        println!("mean reward plateaued at episode {ep}");
    }
    for p in &outcome.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub fn record(a: &RecordArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.common)?;
    let duration = a.duration_ms.unwrap_or(sc.duration_ms);
    if duration == 0 {
        return Err(CliError::Validation("recording length must be positive".into()));
    }
    let mut source: Box<dyn TrajectorySource> = match &a.live {
        Some(url) => Box::new(WsFeed::new(url.clone(), home_pose(&sc)?).open()?),
        None => build_source(&sc)?,
    };
    let mut manifest = Manifest::new("record", a.common.scenario.as_deref(), sc.seed);
    manifest.settings = json!({ "duration_ms": duration, "live": a.live });
    output::write_provenance(&a.common.out, &sc, &manifest)?;

    let trace = capture(source.as_mut(), duration)?;
    let path = a.common.out.join("trace.csv");
    write_trace(&path, &trace)?;
    println!("recorded {} samples to {}", trace.len(), path.display());
    Ok(())
}

fn capture(source: &mut dyn TrajectorySource, duration: Tick) -> Result<TraceWindow, CliError> {
    let pacer = source.wall_clock().then(|| Pacer::start(Pacer::DEFAULT_SLACK));
    let mut trace = TraceWindow::with_capacity(duration as usize);
    for t in 0..duration {
        if let Some(p) = &pacer {
            p.wait(t);
        }
        let pose = source.pose_at(t);
        if source.disconnected() {
            log::warn!("feed closed after {t} ms");
            break;
        }
        trace.push(t, pose).map_err(CliError::runtime)?;
    }
    Ok(trace)
}

fn write_trace(path: &Path, trace: &TraceWindow) -> Result<(), CliError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    trace.write_csv(f).map_err(CliError::runtime)
}
