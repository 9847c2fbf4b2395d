//! JSON-over-HTTP service. Handlers share an immutable model snapshot; a
//! reload replaces the snapshot atomically and in-flight requests keep the
//! one they started with.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use jointpred_core::service::{self, PlanRequest, PredictRequest, SCHEMA_VERSION};
use jointpred_core::{Error, Model, Scene};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct AppState {
    model: RwLock<Option<Arc<Model>>>,
    model_path: Option<PathBuf>,
    scenes: Vec<Scene>,
}

impl AppState {
    pub fn new(model: Option<Model>, model_path: Option<PathBuf>, scenes: Vec<Scene>) -> Self {
        AppState { model: RwLock::new(model.map(Arc::new)), model_path, scenes }
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock").clone()
    }

    fn swap(&self, model: Model) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(scenes))
        .route("/predict", post(predict))
        .route("/plan", post(plan))
        .route("/reload", post(reload))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => (status, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &e.to_string()),
    }
}

fn error(status: StatusCode, code: &str, message: &str) -> Response {
    let body = serde_json::json!({ "error": { "code": code, "message": message } });
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

fn domain_error(e: &Error) -> Response {
    let (status, code) = match e {
        Error::UnknownAgent(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_agent"),
        Error::Invalid(_)
        | Error::Track { .. }
        | Error::Shape(_)
        | Error::UnsupportedKind(_)
        | Error::EnumerationCap { .. }
        | Error::AllConditioned
        | Error::InfeasibleSpec(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    };
    error(status, code, &e.to_string())
}

/// Parses the raw body so malformed JSON is always a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "malformed_body", &e.to_string()))
}

fn loaded(state: &AppState) -> Result<Arc<Model>, Response> {
    state.model().ok_or_else(|| error(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no checkpoint is loaded"))
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let hash = state.model().map(|m| m.content_hash());
    let body = serde_json::json!({
        "status": if hash.is_some() { "ok" } else { "no_model" },
        "schema_version": SCHEMA_VERSION,
        "model_hash": hash,
    });
    json(StatusCode::OK, &body)
}

async fn scenes(State(state): State<Arc<AppState>>) -> Response {
    json(StatusCode::OK, &state.scenes)
}

/// Runs a CPU-bound request off the async workers.
async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(value)) => json(StatusCode::OK, &value),
        Ok(Err(e)) => domain_error(&e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &e.to_string()),
    }
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: PredictRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let model = match loaded(&state) {
        Ok(m) => m,
        Err(resp) => return resp,
    };
    blocking(move || service::predict_scene(&model, &request)).await
}

async fn plan(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let request: PlanRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let model = match loaded(&state) {
        Ok(m) => m,
        Err(resp) => return resp,
    };
    blocking(move || service::plan_scene(&model, &request)).await
}

/// Reloads the checkpoint from the path given at startup.
async fn reload(State(state): State<Arc<AppState>>) -> Response {
    let Some(path) = state.model_path.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no checkpoint path configured");
    };
    match tokio::task::spawn_blocking(move || Model::load(&path)).await {
        Ok(Ok(model)) => {
            let hash = model.content_hash();
            state.swap(model);
            json(StatusCode::OK, &serde_json::json!({ "status": "ok", "model_hash": hash }))
        }
        Ok(Err(e)) => error(StatusCode::SERVICE_UNAVAILABLE, "no_model", &e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &e.to_string()),
    }
}
