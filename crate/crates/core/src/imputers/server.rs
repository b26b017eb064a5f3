use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use super::wire::{ErrorBody, HealthResponse, ImputeRequest};
use super::{impute, Imputer};
use crate::dataset::MaskedSeries;
use crate::error::{Error, Result};

struct AppState {
    model: Arc<dyn Imputer>,
    length: Option<usize>,
}

/// A running imputation service. Dropping it stops the server.
pub struct ImputeServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ImputeServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops on its own.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ImputeServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `model` at `bind_address` (`host:port`, port 0 picks a free one)
/// on a background thread.
///
/// `length` is what `/health` reports; it defaults to the model's own
/// series length.
pub fn serve_imputer(
    model: Arc<dyn Imputer>,
    bind_address: &str,
    length: Option<usize>,
) -> Result<ImputeServer> {
    let startup = |message: String| Error::Startup {
        addr: bind_address.to_string(),
        message,
    };
    let listener = std::net::TcpListener::bind(bind_address).map_err(|e| startup(e.to_string()))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| startup(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| startup(e.to_string()))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("imputeaudit-server")
        .build()
        .map_err(|e| startup(e.to_string()))?;

    let state = Arc::new(AppState {
        length: length.or_else(|| model.series_length()),
        model,
    });
    let app = Router::new()
        .route("/impute", post(impute_handler))
        .route("/health", get(health_handler))
        .with_state(state);

    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name("imputeaudit-server".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("cannot adopt listener: {e}");
                        return;
                    }
                };
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    log::error!("server stopped: {e}");
                }
            });
        })
        .map_err(|e| startup(e.to_string()))?;

    log::info!("serving imputer on http://{addr}");
    Ok(ImputeServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: message.into(),
        }),
    )
        .into_response()
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        kind: state.model.kind().to_string(),
        length: state.length,
    })
}

async fn impute_handler(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<ImputeRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => return error_response(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if req.values.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "values must not be empty");
    }
    let masked = match MaskedSeries::from_parts(req.values, &req.masks, "request") {
        Ok(m) => m,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let model = Arc::clone(&state.model);
    let result = tokio::task::spawn_blocking(move || impute(model.as_ref(), &masked)).await;
    match result {
        Ok(Ok(imputed)) => Json(serde_json::json!({ "imputed": imputed })).into_response(),
        Ok(Err(e @ (Error::Shape(_) | Error::Mask(_) | Error::Config(_)))) => {
            error_response(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
