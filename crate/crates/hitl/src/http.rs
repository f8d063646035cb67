use std::io;
use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bip_core::monitor::HitlVerdict;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

use crate::gateway::{Gateway, GatewayError};

#[derive(Debug, Deserialize)]
struct DecisionBody {
    verdict: HitlVerdict,
    approver: String,
}

#[derive(Debug, Default, Deserialize)]
struct LogQuery {
    #[serde(default)]
    after: u64,
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = match self {
            GatewayError::UnknownToken(_) | GatewayError::UnknownRun(_) => StatusCode::NOT_FOUND,
            GatewayError::AlreadyResolved(_) | GatewayError::DuplicateToken(_) | GatewayError::DuplicateRun(_) => {
                StatusCode::CONFLICT
            }
            GatewayError::Expired(_) => StatusCode::GONE,
            GatewayError::Monitor(_) | GatewayError::Audit(_) | GatewayError::Scenario(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

async fn pending(State(gw): State<Gateway>) -> impl IntoResponse {
    Json(gw.list_pending())
}

async fn decide(
    State(gw): State<Gateway>,
    Path(token): Path<String>,
    Json(body): Json<DecisionBody>,
) -> Result<impl IntoResponse, GatewayError> {
    let outcome = gw.resolve(&token, body.verdict, &body.approver)?;
    Ok(Json(outcome))
}

async fn runs(State(gw): State<Gateway>) -> impl IntoResponse {
    Json(gw.run_ids())
}

async fn run_log(
    State(gw): State<Gateway>,
    Path(run_id): Path<String>,
    Query(q): Query<LogQuery>,
) -> Result<impl IntoResponse, GatewayError> {
    let mut body = String::new();
    for line in gw.log_lines(&run_id, q.after)? {
        body.push_str(&line);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

pub fn router(gw: Gateway) -> Router {
    Router::new()
        .route("/pending", get(pending))
        .route("/decisions/{token}", post(decide))
        .route("/runs", get(runs))
        .route("/runs/{run_id}/log", get(run_log))
        .layer(CorsLayer::permissive())
        .with_state(gw)
}

/// Denies overdue reviews until `stop` fires.
async fn sweep(gw: Gateway, mut stop: oneshot::Receiver<()>) {
    let tick = Duration::from_millis((gw.timeout_ms() / 10).clamp(5, 250));
    loop {
        tokio::select! {
            _ = &mut stop => return,
            _ = tokio::time::sleep(tick) => {
                gw.expire_due();
            }
        }
    }
}

/// The gateway served on its own thread and runtime. Dropping it stops the
/// server.
pub struct Server {
    addr: SocketAddr,
    gateway: Gateway,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl Server {
    pub fn start(gateway: Gateway, addr: impl Into<SocketAddr>) -> io::Result<Server> {
        let listener = std::net::TcpListener::bind(addr.into())?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (stop_tx, stop_rx) = oneshot::channel();
        let gw = gateway.clone();
        let thread = std::thread::Builder::new().name("hitl-gateway".into()).spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                let (sweep_tx, sweep_rx) = oneshot::channel();
                let sweeper = tokio::spawn(sweep(gw.clone(), sweep_rx));
                let result = axum::serve(listener, router(gw))
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
                let _ = sweep_tx.send(());
                let _ = sweeper.await;
                result
            })
        })?;
        Ok(Server {
            addr,
            gateway,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("gateway thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.wait()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
