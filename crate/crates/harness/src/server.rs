use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use actmon_core::prompt::{ActivationsRequest, InferenceBackend, LogitsRequest};
use actmon_core::synth::MockModel;
use actmon_core::{Error, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Answer this many requests with 503 before serving normally.
    pub fail_first: usize,
}

struct Shared {
    model: MockModel,
    fail_remaining: AtomicUsize,
    served: AtomicUsize,
}

impl Shared {
    fn gate(&self) -> Option<Response> {
        self.served.fetch_add(1, Ordering::SeqCst);
        let failing = self
            .fail_remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        failing.then(|| (StatusCode::SERVICE_UNAVAILABLE, "injected failure").into_response())
    }
}

fn reply<T: serde::Serialize>(result: Result<T>) -> Response {
    match result {
        Ok(body) => Json(body).into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, format!("{}: {e}", e.class())).into_response(),
    }
}

async fn activations(State(s): State<Arc<Shared>>, Json(req): Json<ActivationsRequest>) -> Response {
    if let Some(r) = s.gate() {
        return r;
    }
    reply(s.model.activations(&req))
}

async fn logits(State(s): State<Arc<Shared>>, Json(req): Json<LogitsRequest>) -> Response {
    if let Some(r) = s.gate() {
        return r;
    }
    reply(s.model.logits(&req))
}

fn shared(model: MockModel, options: &ServerOptions) -> Arc<Shared> {
    Arc::new(Shared {
        model,
        fail_remaining: AtomicUsize::new(options.fail_first),
        served: AtomicUsize::new(0),
    })
}

fn build(state: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/activations", post(activations))
        .route("/v1/logits", post(logits))
        .with_state(state)
}

pub fn router(model: MockModel) -> Router {
    build(shared(model, &ServerOptions::default()))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(Error::Io)
}

/// Mock server on a background thread; shuts down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(model: MockModel, options: ServerOptions) -> Result<Self> {
        let state = shared(model, &options);
        let rt = runtime()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = build(state.clone());
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let served = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = served.await {
                    log::error!("mock server stopped: {e}");
                }
            });
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, including injected failures.
    pub fn requests_served(&self) -> usize {
        self.state.served.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves until the process is killed.
pub fn serve_blocking(model: MockModel, addr: SocketAddr) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("mock inference server on http://{}", listener.local_addr()?);
        axum::serve(listener, router(model)).await
    })?;
    Ok(())
}
