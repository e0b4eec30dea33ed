use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use telesync_core::model::Tick;
use telesync_core::pipeline::{EpisodeLog, EpisodeSummary, InjectedDelays, Scenario};

use crate::CliError;

/// What produced an output directory. Written next to `scenario.toml`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    /// Scenario file as given on the command line.
    pub scenario_file: Option<String>,
    pub policy: Option<String>,
    pub seed: u64,
    pub telesync_version: &'static str,
    /// Command-specific settings.
    pub settings: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &'static str, scenario_file: Option<&Path>, seed: u64) -> Self {
        Self {
            command,
            scenario_file: scenario_file.map(|p| p.display().to_string()),
            policy: None,
            seed,
            telesync_version: env!("CARGO_PKG_VERSION"),
            settings: serde_json::Value::Null,
        }
    }
}

pub fn write_provenance(dir: &Path, sc: &Scenario, manifest: &Manifest) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("scenario.toml"), sc.to_toml())?;
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, manifest).map_err(CliError::runtime)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub path: &'static str,
    pub stage: &'static str,
    pub count: usize,
    pub mean: f64,
    pub min: Tick,
    pub max: Tick,
}

type Getter = fn(&InjectedDelays) -> Option<Tick>;

const CONTROL: [(&str, Getter); 6] = [
    ("t_p", |d| d.t_p),
    ("t_o", |d| d.t_o),
    ("t_c", |d| d.t_c),
    ("t_i", |d| d.t_i),
    ("t_l", |d| d.t_l),
    ("total", |d| d.control_sum()),
];

const RENDER: [(&str, Getter); 7] = [
    ("t_p", |d| d.t_p),
    ("t_o", |d| d.t_o),
    ("t_c", |d| d.t_c),
    ("frame_wait", |d| d.frame_wait),
    ("t_r", |d| d.t_r),
    ("t_v", |d| d.t_v),
    ("total", |d| d.render_sum()),
];

/// Per-stage statistics of the injected delays over messages whose two
/// branches both completed.
pub fn latency_breakdown(log: &EpisodeLog) -> Vec<StageStats> {
    let stats = |path: &'static str, stage: &'static str, get: Getter| {
        let v: Vec<Tick> = log.complete_messages().filter_map(|m| get(&m.injected)).collect();
        StageStats {
            path,
            stage,
            count: v.len(),
            mean: if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<Tick>() as f64 / v.len() as f64
            },
            min: v.iter().copied().min().unwrap_or(0),
            max: v.iter().copied().max().unwrap_or(0),
        }
    };
    CONTROL
        .iter()
        .map(|&(s, g)| stats("control", s, g))
        .chain(RENDER.iter().map(|&(s, g)| stats("render", s, g)))
        .collect()
}

pub fn print_breakdown(rows: &[StageStats]) {
    println!(
        "{:<8} {:<11} {:>9} {:>6} {:>6}",
        "path", "stage", "mean ms", "min", "max"
    );
    for r in rows {
        println!(
            "{:<8} {:<11} {:>9.2} {:>6} {:>6}",
            r.path, r.stage, r.mean, r.min, r.max
        );
    }
    if let Some(r) = rows.first() {
        println!("({} messages with both branches complete)", r.count);
    }
}

pub fn write_breakdown(dir: &Path, rows: &[StageStats]) -> Result<(), CliError> {
    let mut w = csv_writer(&dir.join("latency.csv"))?;
    for r in rows {
        w.serialize(r).map_err(CliError::runtime)?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_summary(s: &EpisodeSummary) {
    println!("rmse_p_om {:.6} m   rmse_p_mr {:.6} m", s.rmse_p_om, s.rmse_p_mr);
    println!("rmse_o_om {:.6}     rmse_o_mr {:.6}", s.rmse_o_om, s.rmse_o_mr);
    let lag = s
        .effective_lag_ms
        .map_or("undefined".to_string(), |l| format!("{l} ms"));
    println!(
        "mean AoL {:.2} ms   effective lag {lag}   dropped {}",
        s.mean_aol, s.drop_count
    );
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(CliError::runtime)
}
