use std::net::TcpStream;
use std::sync::mpsc;

use serde::Deserialize;
use telesync_core::model::Pose;
use telesync_core::pipeline::{LiveSource, TrajectorySource};
use telesync_core::rl::LiveFeed;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use crate::CliError;

#[derive(Deserialize)]
struct WirePose {
    #[serde(rename = "type")]
    kind: String,
    p: [f64; 7],
}

/// Pose of a `{"type":"pose","p":[px,py,pz,qx,qy,qz,qw],...}` frame; other
/// frames and malformed poses give `None`.
pub fn parse_pose_frame(text: &str) -> Option<Pose> {
    let w: WirePose = serde_json::from_str(text).ok()?;
    if w.kind != "pose" {
        return None;
    }
    Pose::from_array(w.p).ok()
}

pub fn check_url(url: &str) -> Result<(), CliError> {
    if url.starts_with("ws://") {
        Ok(())
    } else {
        Err(CliError::Validation(format!("live feed `{url}` must be a ws:// URL")))
    }
}

type Socket = WebSocket<MaybeTlsStream<TcpStream>>;

fn connect(url: &str) -> Result<Socket, CliError> {
    check_url(url)?;
    tungstenite::connect(url)
        .map(|(ws, _)| ws)
        .map_err(|e| CliError::Runtime(format!("gateway feed {url} is unreachable: {e}")))
}

/// Opens and closes the feed once, so that a dead gateway is reported before
/// any training starts.
pub fn probe_gateway(url: &str) -> Result<(), CliError> {
    let mut ws = connect(url)?;
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

/// Forwards pose frames into a channel until the socket or the receiver
/// goes away.
fn spawn_reader(mut ws: Socket) -> mpsc::Receiver<Pose> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || loop {
        match ws.read() {
            Ok(Message::Text(t)) => {
                if let Some(p) = parse_pose_frame(&t) {
                    if tx.send(p).is_err() {
                        let _ = ws.close(None);
                        break;
                    }
                }
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    });
    rx
}

/// Live feed over a gateway's operator-feed socket; every episode opens a
/// fresh connection and runs at wall-clock pace.
pub struct WsFeed {
    url: String,
    home: Pose,
}

impl WsFeed {
    pub fn new(url: impl Into<String>, home: Pose) -> Self {
        Self { url: url.into(), home }
    }

    pub fn open(&self) -> Result<LiveSource, CliError> {
        Ok(LiveSource::paced(spawn_reader(connect(&self.url)?), self.home))
    }
}

impl LiveFeed for WsFeed {
    fn next_episode(&mut self) -> Option<Box<dyn TrajectorySource>> {
        match self.open() {
            Ok(s) => Some(Box::new(s)),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        }
    }
}
