//! `telesync` command line: runs scenarios, trains and evaluates horizon
//! policies, records and replays operator traces, and sweeps fixed horizons.
//!
//! Every command writes into its `--out` directory together with the exact
//! scenario (`scenario.toml`) and a `manifest.json` naming the command,
//! policy and seed.

mod commands;
mod error;
mod live;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{parse_range, HorizonRange};
pub use error::CliError;
pub use live::{parse_pose_frame, probe_gateway, WsFeed};

#[derive(Debug, Parser)]
#[command(name = "telesync", version, about = "Latency-compensated teleoperation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and export its logs and summary.
    Run(RunArgs),
    /// Train a horizon policy with PPO: recorded motion first, then an
    /// optional live phase.
    Train(TrainArgs),
    /// Mean reward of a policy over seeded evaluation episodes.
    Eval(EvalArgs),
    /// Run a scenario with its operator motion replaced by a recorded trace.
    Replay(ReplayArgs),
    /// Evaluate every fixed horizon in a range and report the best.
    Sweep(SweepArgs),
    /// Write the operator motion of a scenario, or of a live feed, as a trace.
    Record(RecordArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file (TOML or JSON); built-in defaults when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "telesync-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// `zero`, `fixed:H`, `fixed:HR,HC`, `oracle`, or a checkpoint path.
    #[arg(long, default_value = "zero")]
    pub policy: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Recorded-phase episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Length of each recorded-phase episode.
    #[arg(long)]
    pub episode_ms: Option<u64>,
    /// Live-phase episodes.
    #[arg(long)]
    pub hitl_episodes: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Recorded trace CSV; repeat for several. The scenario's own source is
    /// used when none is given.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    /// Gateway operator feed for the live phase, e.g.
    /// `ws://127.0.0.1:8080/sessions/<id>/feed`.
    #[arg(long)]
    pub live: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "zero")]
    pub policy: String,
    #[arg(long, default_value_t = 3)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trace CSV with header `tick,px,py,pz,qx,qy,qz,qw`.
    pub trace: PathBuf,
    #[arg(long, default_value = "zero")]
    pub policy: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Horizons in ms, both ends included: `a..b` (or `a..=b`).
    #[arg(long, default_value = "0..200")]
    pub range: String,
    #[arg(long, default_value_t = 1)]
    pub step: u64,
    /// Evaluation episodes per horizon.
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[command(flatten)]
    pub common: Common,
    /// Record this gateway operator feed instead of the scenario source.
    #[arg(long)]
    pub live: Option<String>,
    /// Recording length; the scenario duration when omitted.
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => commands::run(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Replay(a) => commands::replay(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Record(a) => commands::record(a),
    }
}
