use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::ws::rejection::WebSocketUpgradeRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::session::{Attachment, CreateSession, Session};
use crate::wire::{ErrCode, Outbound};
use crate::GatewayConfig;

#[derive(Clone)]
pub struct AppState {
    cfg: Arc<GatewayConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<Session>>>>,
}

impl AppState {
    pub fn new(cfg: GatewayConfig) -> Self {
        Self {
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
        }
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}/summary", get(summary))
        .route("/sessions/{id}/ws", get(operator_ws))
        .route("/sessions/{id}/feed", get(feed_ws))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn unknown(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("no session `{id}`"))
}

async fn healthz(State(st): State<AppState>) -> Json<serde_json::Value> {
    let n = st.sessions.lock().unwrap_or_else(|e| e.into_inner()).len();
    Json(json!({ "status": "ok", "sessions": n, "version": env!("CARGO_PKG_VERSION") }))
}

async fn create(State(st): State<AppState>, Json(req): Json<CreateSession>) -> Response {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let cfg = Arc::clone(&st.cfg);
    let made = tokio::task::spawn_blocking(move || Session::create(id, req, &cfg)).await;
    match made {
        Ok(Ok(s)) => {
            let body = json!({
                "id": s.id,
                "state": s.state(),
                "ws": format!("/sessions/{}/ws", s.id),
                "feed": format!("/sessions/{}/feed", s.id),
            });
            log::info!("session {} created", s.id);
            st.sessions
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .insert(s.id.clone(), s);
            (StatusCode::CREATED, Json(body)).into_response()
        }
        Ok(Err(why)) => error(StatusCode::BAD_REQUEST, why),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn summary(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    match st.session(&id) {
        Some(s) => Json(s.info()).into_response(),
        None => unknown(&id),
    }
}

type Upgrade = Result<WebSocketUpgrade, WebSocketUpgradeRejection>;

async fn operator_ws(State(st): State<AppState>, Path(id): Path<String>, ws: Upgrade) -> Response {
    let Some(session) = st.session(&id) else {
        return unknown(&id);
    };
    let ws = match ws {
        Ok(ws) => ws,
        Err(e) => return e.into_response(),
    };
    let Some(att) = session.attach() else {
        return error(StatusCode::CONFLICT, "the session already has its operator");
    };
    ws.on_upgrade(move |socket| async move {
        operator_loop(&session, socket, att).await;
        session.detach();
        log::info!("session {} closed", session.id);
    })
}

async fn send(sink: &mut (impl SinkExt<Message> + Unpin), frame: &Outbound) -> bool {
    sink.send(Message::Text(frame.to_json().into())).await.is_ok()
}

async fn operator_loop(session: &Arc<Session>, socket: WebSocket, att: Attachment) {
    let Attachment {
        mut events,
        mut frames,
        hello,
    } = att;
    let (mut sink, mut stream) = socket.split();
    if !send(&mut sink, &hello).await {
        return;
    }
    loop {
        tokio::select! {
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(t))) => {
                    for reply in session.handle_text(t.as_str()) {
                        if !send(&mut sink, &reply).await {
                            return;
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let reply = Outbound::Err {
                        cmd: None,
                        code: ErrCode::Malformed,
                        message: "frames are JSON text".into(),
                        state: session.state(),
                    };
                    if !send(&mut sink, &reply).await {
                        return;
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                Some(Ok(_)) => {}
            },
            Some(ev) = events.recv() => {
                if !send(&mut sink, &ev).await {
                    return;
                }
            }
            Ok(()) = frames.changed() => {
                // latest wins: frames produced while this send is pending
                // are overwritten in the slot
                let frame = frames.borrow_and_update().clone();
                if let Some(f) = frame {
                    if !send(&mut sink, &Outbound::State(Box::new((*f).clone()))).await {
                        return;
                    }
                }
            }
        }
    }
}

async fn feed_ws(State(st): State<AppState>, Path(id): Path<String>, ws: Upgrade) -> Response {
    let Some(session) = st.session(&id) else {
        return unknown(&id);
    };
    let Some(mut rx) = session.subscribe_feed() else {
        return error(StatusCode::GONE, "the session is closed");
    };
    let ws = match ws {
        Ok(ws) => ws,
        Err(e) => return e.into_response(),
    };
    ws.on_upgrade(move |socket| async move {
        let (mut sink, mut stream) = socket.split();
        loop {
            tokio::select! {
                pose = rx.recv() => match pose {
                    Ok(text) => {
                        if sink.send(Message::Text(text.as_ref().into())).await.is_err() {
                            break;
                        }
                    }
                    Err(RecvError::Lagged(n)) => log::debug!("feed subscriber skipped {n} poses"),
                    Err(RecvError::Closed) => break,
                },
                msg = stream.next() => match msg {
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => {}
                },
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    })
}
