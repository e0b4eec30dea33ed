use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use telesync_core::pipeline::EpisodeSummary;
use telesync_core::rl::{read_curve, Checkpoint};

fn telesync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_telesync"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = telesync(args);
    assert!(
        out.status.success(),
        "telesync {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn delay_block(name: &str, kind: &str, mean: f64, std: f64) -> String {
    format!("[stages.{name}]\nkind = \"{kind}\"\nmean_ms = {mean}\nstd_ms = {std}\nfloor_ms = 1\n")
}

/// Scenario file with a constant uplink delay (or a gaussian one when
/// `std > 0`) and short episodes.
fn scenario(dir: &Path, name: &str, t_o: f64, std: f64, duration_ms: u64) -> PathBuf {
    let kind = if std > 0.0 { "gaussian" } else { "constant" };
    let text = format!(
        "name = \"{name}\"\nseed = 3\nduration_ms = {duration_ms}\n\n{}\n[ppo]\nepisode_ms = 600\nepisodes_per_update = 2\n",
        delay_block("t_o", kind, t_o, std)
    );
    let p = dir.join(format!("{name}.toml"));
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> EpisodeSummary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

/// Mean realized render-path latency from `latency.csv`.
fn mean_render_total(dir: &Path) -> f64 {
    let text = std::fs::read_to_string(dir.join("latency.csv")).unwrap();
    let line = text.lines().find(|l| l.starts_with("render,total,")).unwrap();
    line.split(',').nth(3).unwrap().parse().unwrap()
}

#[test]
fn run_zero_horizon_lags_by_the_render_latency() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "jitter", 75.0, 12.5, 4000);
    let out = tmp.path().join("run");
    let stdout = ok(&[
        "run",
        "--scenario",
        s(&sc),
        "--policy",
        "zero",
        "--seed",
        "7",
        "--out",
        s(&out),
    ]);
    assert!(stdout.contains("render") && stdout.contains("rmse_p_om"), "{stdout}");
    let lag = summary(&out).effective_lag_ms.unwrap() as f64;
    let t_cr = mean_render_total(&out);
    assert!((lag - t_cr).abs() <= 5.0, "lag {lag} vs mean render latency {t_cr}");
    for f in [
        "scenario.toml",
        "manifest.json",
        "operator.csv",
        "virtual.csv",
        "real.csv",
        "messages.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["policy"], "zero");
    assert!(std::fs::read_to_string(out.join("scenario.toml"))
        .unwrap()
        .contains("seed = 7"));
}

#[test]
fn run_matching_fixed_horizon_cancels_the_lag() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const75", 75.0, 0.0, 4000);
    let out = tmp.path().join("run");
    ok(&["run", "--scenario", s(&sc), "--policy", "fixed:75", "--out", s(&out)]);
    let lag = summary(&out).effective_lag_ms.unwrap();
    assert!(lag.abs() <= 2, "lag {lag}");
}

#[test]
fn repeated_run_writes_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "jitter", 75.0, 12.5, 2000);
    let out = tmp.path().join("run");
    let args = [
        "run",
        "--scenario",
        s(&sc),
        "--policy",
        "fixed:60",
        "--seed",
        "11",
        "--out",
        s(&out),
    ];
    ok(&args);
    let first = files(&out);
    ok(&args);
    assert_eq!(files(&out), first);
}

#[test]
fn invalid_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "duration_ms = 0\n").unwrap();
    let out = telesync(&["run", "--scenario", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duration_ms"));

    let missing = telesync(&["run", "--scenario", s(&tmp.path().join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(2));
    let policy = telesync(&["run", "--policy", "fixed:x", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(policy.status.code(), Some(2));
    let ckpt = telesync(&[
        "run",
        "--policy",
        s(&tmp.path().join("none.bin")),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(ckpt.status.code(), Some(2));
}

#[test]
fn train_one_episode_gives_one_checkpoint_and_row() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let out = tmp.path().join("train");
    ok(&[
        "train",
        "--scenario",
        s(&sc),
        "--episodes",
        "1",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(read_curve(&out.join("training_curve.csv")).unwrap().len(), 1);
    let ckpts: Vec<_> = files(&out)
        .into_keys()
        .filter(|f| f.starts_with("checkpoint"))
        .collect();
    assert_eq!(ckpts, vec!["checkpoint-recorded.bin".to_string()]);
    let ck = Checkpoint::load(&out.join("checkpoint-recorded.bin")).unwrap();
    assert_eq!(ck.header.episodes, 1);

    // the checkpoint plugs back in as a policy
    let run = tmp.path().join("run");
    let ckpt = out.join("checkpoint-recorded.bin");
    ok(&["run", "--scenario", s(&sc), "--policy", s(&ckpt), "--out", s(&run)]);
    assert!(std::fs::read_to_string(run.join("manifest.json"))
        .unwrap()
        .contains("checkpoint:"));
}

#[test]
fn train_writes_one_curve_row_per_episode() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let out = tmp.path().join("train");
    ok(&[
        "train",
        "--scenario",
        s(&sc),
        "--episodes",
        "150",
        "--episode-ms",
        "300",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    let curve = read_curve(&out.join("training_curve.csv")).unwrap();
    assert_eq!(curve.len(), 150);
    assert_eq!(curve.last().unwrap().episode, 150);
}

#[test]
fn train_with_unreachable_gateway_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let out = tmp.path().join("train");
    let res = telesync(&[
        "train",
        "--scenario",
        s(&sc),
        "--episodes",
        "2",
        "--live",
        "ws://127.0.0.1:9/sessions/x/feed",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("unreachable"), "{err}");
    assert!(!out.join("checkpoint-hitl.bin").exists());

    let scheme = telesync(&[
        "train",
        "--scenario",
        s(&sc),
        "--live",
        "http://127.0.0.1:9",
        "--out",
        s(&out),
    ]);
    assert_eq!(scheme.status.code(), Some(2));
}

#[test]
fn diverged_training_keeps_the_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let out = tmp.path().join("train");
    let res = telesync(&[
        "train",
        "--scenario",
        s(&sc),
        "--episodes",
        "6",
        "--learning-rate",
        "1e300",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
    let ck = Checkpoint::load(&out.join("checkpoint-recorded.bin")).unwrap();
    assert!(ck.agent.is_finite());
}

#[test]
fn replay_reproduces_the_recorded_run() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "jitter", 75.0, 12.5, 3000);
    let run = tmp.path().join("run");
    ok(&["run", "--scenario", s(&sc), "--seed", "5", "--out", s(&run)]);
    let replay = tmp.path().join("replay");
    ok(&[
        "replay",
        s(&run.join("operator.csv")),
        "--scenario",
        s(&sc),
        "--seed",
        "5",
        "--out",
        s(&replay),
    ]);
    assert_eq!(summary(&replay), summary(&run));
    // the copied trace makes the output directory self-contained
    let again = tmp.path().join("again");
    ok(&[
        "run",
        "--scenario",
        s(&replay.join("scenario.toml")),
        "--out",
        s(&again),
    ]);
    assert_eq!(summary(&again), summary(&run));
}

#[test]
fn replay_under_doubled_uplink_delay_adds_that_delay_to_the_lag() {
    let tmp = tempfile::tempdir().unwrap();
    let base = scenario(tmp.path(), "d40", 40.0, 0.0, 4000);
    let doubled = scenario(tmp.path(), "d80", 80.0, 0.0, 4000);
    let run = tmp.path().join("run");
    ok(&["run", "--scenario", s(&base), "--out", s(&run)]);
    let replay = tmp.path().join("replay");
    ok(&[
        "replay",
        s(&run.join("operator.csv")),
        "--scenario",
        s(&doubled),
        "--out",
        s(&replay),
    ]);
    let (a, b) = (
        summary(&run).effective_lag_ms.unwrap(),
        summary(&replay).effective_lag_ms.unwrap(),
    );
    assert!((b - a - 40).abs() <= 3, "{a} -> {b}");
}

#[test]
fn replay_rejects_empty_and_malformed_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    std::fs::write(&empty, "tick,px,py,pz,qx,qy,qz,qw\n").unwrap();
    let res = telesync(&["replay", s(&empty), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));

    let bad = tmp.path().join("bad.csv");
    std::fs::write(
        &bad,
        "tick,px,py,pz,qx,qy,qz,qw\n0,0.3,0.1,0.3,0,0,0,1\n1,0.3,oops,0.3,0,0,0,1\n",
    )
    .unwrap();
    let res = telesync(&["replay", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line: 3") || err.contains("line 3"), "{err}");
}

fn sweep_rows(dir: &Path) -> Vec<(u64, f64)> {
    let text = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("horizon,reward,rmse_p_om,rmse_p_mr,rmse_o_om,rmse_o_mr")
    );
    lines
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

fn best(dir: &Path) -> u64 {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("best.json")).unwrap()).unwrap();
    v["horizon"].as_u64().unwrap()
}

#[test]
fn sweep_finds_the_constant_delay() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 4000);
    let out = tmp.path().join("sweep");
    let stdout = ok(&[
        "sweep",
        "--scenario",
        s(&sc),
        "--range",
        "0..120",
        "--step",
        "10",
        "--out",
        s(&out),
    ]);
    assert_eq!(sweep_rows(&out).len(), 13);
    let h = best(&out);
    assert!(h.abs_diff(60) <= 10, "argmax {h}");
    assert!(stdout.contains(&format!("best fixed horizon {h} ms")));
}

#[test]
fn sweep_without_delay_prefers_no_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "nodelay", 0.0, 0.0, 3000);
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--scenario",
        s(&sc),
        "--range",
        "0..=40",
        "--step",
        "10",
        "--out",
        s(&out),
    ]);
    assert_eq!(best(&out), 0);
}

#[test]
fn single_point_sweep_has_one_row_and_bounds_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--scenario", s(&sc), "--range", "60..60", "--out", s(&out)]);
    assert_eq!(sweep_rows(&out).len(), 1);
    for range in ["0..500", "9..3", "a..b"] {
        let res = telesync(&["sweep", "--scenario", s(&sc), "--range", range, "--out", s(&out)]);
        assert_eq!(res.status.code(), Some(2), "{range}");
    }
}

#[test]
fn record_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scenario(tmp.path(), "const60", 60.0, 0.0, 2000);
    let rec = tmp.path().join("rec");
    ok(&[
        "record",
        "--scenario",
        s(&sc),
        "--duration-ms",
        "1500",
        "--out",
        s(&rec),
    ]);
    let text = std::fs::read_to_string(rec.join("trace.csv")).unwrap();
    assert_eq!(text.lines().count(), 1501);

    let train = tmp.path().join("train");
    ok(&[
        "train",
        "--scenario",
        s(&sc),
        "--trace",
        s(&rec.join("trace.csv")),
        "--episodes",
        "2",
        "--out",
        s(&train),
    ]);
    let ev = tmp.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--scenario",
        s(&sc),
        "--policy",
        "oracle",
        "--episodes",
        "2",
        "--out",
        s(&ev),
    ]);
    assert!(stdout.contains("oracle: mean reward"), "{stdout}");
    assert_eq!(read_curve(&ev.join("eval.csv")).unwrap().len(), 2);
}
