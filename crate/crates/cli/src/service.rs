//! HTTP front end over [`Animator`].

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facemotion::animator::{Animator, ModelInfo};
use facemotion::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::api;

/// Shared service state. Requests clone the current `Arc`, so a reload never
/// affects a request already in flight.
pub struct AppState {
    model: RwLock<Arc<Animator>>,
    checkpoint: Option<PathBuf>,
    vae: Option<PathBuf>,
}

impl AppState {
    pub fn new(animator: Animator, checkpoint: Option<PathBuf>, vae: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { model: RwLock::new(Arc::new(animator)), checkpoint, vae })
    }

    pub fn model(&self) -> Arc<Animator> {
        self.model.read().expect("model lock poisoned").clone()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into() } }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::Shape(_)
            | Error::Image(_)
            | Error::UnreadableFrame { .. }
            | Error::InvalidRotation { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
            Error::MissingVae => Self::new(StatusCode::CONFLICT, "missing_vae", e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

/// Parses the body, then runs `f` on the blocking pool against the current model.
async fn run<B, T>(state: &AppState, body: Bytes, f: fn(&Animator, &B) -> facemotion::Result<T>) -> ApiResult<T>
where
    B: DeserializeOwned + Send + 'static,
    T: Send + 'static,
{
    let req: B = parse(&body)?;
    let model = state.model();
    let out = tokio::task::spawn_blocking(move || f(&model, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()))?;
    match out {
        Ok(v) => Ok(Json(v)),
        Err(e) => {
            let err = ApiError::from(e);
            if err.status.is_server_error() {
                log::error!("{}", err.body.message);
            }
            Err(err)
        }
    }
}

async fn animate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<api::ImageResponse> {
    run(&state, body, api::animate).await
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<api::ImageResponse> {
    run(&state, body, api::edit).await
}

async fn interpolate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<api::InterpolateResponse> {
    run(&state, body, api::interpolate).await
}

async fn info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(state.model().info())
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    let Some(path) = state.checkpoint.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_checkpoint_path", "service was not started from a checkpoint file"));
    };
    let vae = state.vae.clone();
    let fresh = tokio::task::spawn_blocking(move || Animator::load(&path, vae.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", e.to_string()))?;
    let info = fresh.info();
    *state.model.write().expect("model lock poisoned") = Arc::new(fresh);
    log::info!("reloaded checkpoint {}", info.checkpoint_hash);
    Ok(Json(info))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/animate", post(animate))
        .route("/edit", post(edit))
        .route("/interpolate", post(interpolate))
        .route("/model/info", get(info))
        .route("/model/reload", post(reload))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
