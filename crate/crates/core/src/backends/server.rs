//! HTTP mock server exposing [`MockBackends`] over the wire contract.
//!
//! Besides the five `/v1/*` routes it serves `GET /healthz`,
//! `GET /mock/stats` (per-route call counts) and `POST /mock/reset`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use super::mock::MockBackends;
use super::wire::Route;
use crate::{Error, Result};

pub fn router(mock: Arc<MockBackends>) -> Router {
    Router::new()
        .route("/v1/{route}", post(handle_route))
        .route("/healthz", get(health))
        .route("/mock/stats", get(stats))
        .route("/mock/reset", post(reset))
        .layer(DefaultBodyLimit::max(512 << 20))
        .with_state(mock)
}

async fn handle_route(
    State(mock): State<Arc<MockBackends>>,
    Path(route): Path<String>,
    body: Bytes,
) -> (StatusCode, Json<Value>) {
    let Some(route) = Route::from_name(&route) else {
        return (
            StatusCode::NOT_FOUND,
            Json(json!({ "error": format!("unknown route `{route}`") })),
        );
    };
    let body: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "error": format!("body is not JSON: {e}") })),
            )
        }
    };
    let (status, v) = mock.handle(route, &body);
    (
        StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        Json(v),
    )
}

async fn health(State(mock): State<Arc<MockBackends>>) -> Json<Value> {
    Json(json!({ "status": "ok", "models": mock.models() }))
}

async fn stats(State(mock): State<Arc<MockBackends>>) -> Json<Value> {
    Json(mock.stats())
}

async fn reset(State(mock): State<Arc<MockBackends>>) -> Json<Value> {
    mock.reset_counters();
    Json(mock.stats())
}

/// A mock server running on a background thread; stops on drop.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(mock: Arc<MockBackends>, addr: &str) -> Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("mh-mock-server".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)
                        .expect("listener registers with tokio");
                    let _ = axum::serve(listener, router(mock))
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                });
            })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits (it only does on shutdown).
    pub fn join(mut self) -> Result<()> {
        if let Some(t) = self.thread.take() {
            t.join()
                .map_err(|_| Error::Config("mock server thread panicked".into()))?;
        }
        Ok(())
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
