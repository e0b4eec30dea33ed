use std::path::PathBuf;

use clap::Parser;
use telesync_gateway::{serve, GatewayConfig, DEFAULT_RATE_CAP_HZ};

#[derive(Debug, Parser)]
#[command(name = "telesync-gateway", version, about = "Operator session gateway for telesync")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Where episode logs and checkpoints are written.
    #[arg(long, default_value = "gateway-out")]
    out: PathBuf,
    /// Directory that scenario paths in session requests are relative to.
    #[arg(long, default_value = ".")]
    scenario_dir: PathBuf,
    /// Accepted pose frames per second per session.
    #[arg(long, default_value_t = DEFAULT_RATE_CAP_HZ)]
    rate_cap_hz: u32,
    #[arg(long, default_value_t = 100)]
    max_frame_hz: u32,
}

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TELESYNC_LOG", "info")).init();
    let a = Args::parse();
    let cfg = GatewayConfig {
        out_dir: a.out,
        scenario_dir: a.scenario_dir,
        rate_cap_hz: a.rate_cap_hz,
        max_frame_hz: a.max_frame_hz,
    };
    let listener = match tokio::net::TcpListener::bind(&a.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot listen on {}: {e}", a.bind);
            std::process::exit(3);
        }
    };
    log::info!("listening on {}", a.bind);
    if let Err(e) = serve(listener, cfg).await {
        eprintln!("error: {e}");
        std::process::exit(3);
    }
}
