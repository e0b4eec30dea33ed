//! Websocket gateway between a live operator and the simulator.
//!
//! `POST /sessions` creates a session; the operator then connects to
//! `/sessions/{id}/ws`, streams pose frames and issues control commands,
//! and receives state frames while an episode runs. Accepted poses are
//! republished on `/sessions/{id}/feed` for recorders and trainers.

mod clock;
mod core;
mod runner;
mod server;
mod session;
pub mod wire;

use std::path::PathBuf;

pub use clock::{sample as clock_sample, ClockSample, ClockSync, SyncStep, SYNC_ROUNDS};
pub use core::{Counters, Ingest, RateWindow, SessionCore, DEFAULT_RATE_CAP_HZ};
pub use server::{router, AppState};
pub use session::{CreateSession, ScenarioArg, Session, SessionInfo};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Episode logs go to `<out_dir>/<session id>/episode-<n>/`.
    pub out_dir: PathBuf,
    /// Base for scenario paths in session requests.
    pub scenario_dir: PathBuf,
    pub rate_cap_hz: u32,
    /// Upper bound on state frames per second; the render rate also bounds it.
    pub max_frame_hz: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            out_dir: "gateway-out".into(),
            scenario_dir: ".".into(),
            rate_cap_hz: DEFAULT_RATE_CAP_HZ,
            max_frame_hz: 100,
        }
    }
}

/// Serves the gateway on `listener` until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, cfg: GatewayConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(cfg))).await
}
