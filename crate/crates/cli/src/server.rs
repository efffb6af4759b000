//! HTTP inference service.
//!
//! `POST /v1/inpaint` takes base64 PNGs and returns the inpainted image,
//! `GET /v1/health` reports the loaded model, everything else is served from
//! the static directory when one is configured.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{Notify, Semaphore};
use tower_http::services::ServeDir;

use wavepaint::io::{decode_mask, decode_rgb, encode_rgb};
use wavepaint::model::WavePaint;
use wavepaint::{count_parameters, Inpainter, ModelConfig};

pub const DEFAULT_MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
    pub timing_ms: f64,
    pub model_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_id: String,
    pub model: ModelConfig,
    pub parameters: usize,
}

/// A checkpoint ready for inference.
pub struct LoadedModel {
    pub id: String,
    pub inpainter: Inpainter<f32>,
}

impl LoadedModel {
    /// The id is the first 16 hex digits of the SHA-256 of the file.
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck = wavepaint::Checkpoint::<f32>::from_bytes(&bytes)?;
        let model = WavePaint::new(ck.model)?;
        Ok(LoadedModel { id: model_id(&bytes), inpainter: Inpainter::new(model, ck.params)? })
    }
}

pub fn model_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct AppState {
    model: OnceLock<Arc<LoadedModel>>,
    permits: Arc<Semaphore>,
    max_body_bytes: usize,
}

impl AppState {
    /// `workers` bounds the number of forward passes in flight.
    pub fn new(workers: usize, max_body_bytes: usize) -> Arc<Self> {
        Arc::new(AppState { model: OnceLock::new(), permits: Arc::new(Semaphore::new(workers.max(1))), max_body_bytes })
    }

    /// Returns false if a model was already installed.
    pub fn install(&self, m: LoadedModel) -> bool {
        self.model.set(Arc::new(m)).is_ok()
    }

    fn loaded(&self) -> Option<Arc<LoadedModel>> {
        self.model.get().cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn health(State(st): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let m = st.loaded().ok_or_else(ApiError::unavailable)?;
    let cfg = m.inpainter.model().config().clone();
    Ok(Json(Health { status: "ok".into(), model_id: m.id.clone(), parameters: count_parameters(&cfg), model: cfg }))
}

fn run_request(model: &LoadedModel, req: &InpaintRequest) -> Result<Vec<u8>, ApiError> {
    let image_png = B64.decode(&req.image).map_err(|e| ApiError::bad_request(format!("image: bad base64: {e}")))?;
    let mask_png = B64.decode(&req.mask).map_err(|e| ApiError::bad_request(format!("mask: bad base64: {e}")))?;
    let img = decode_rgb(&image_png).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    let mask = decode_mask(&mask_png).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    if (mask.width, mask.height) != (img.width() as usize, img.height() as usize) {
        return Err(ApiError::bad_request(format!(
            "image is {}x{} but mask is {}x{}",
            img.width(),
            img.height(),
            mask.width,
            mask.height
        )));
    }
    if img.width() < 2 || img.height() < 2 {
        return Err(ApiError::bad_request("image must be at least 2x2"));
    }
    let out = model
        .inpainter
        .inpaint(&img, &mask)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    encode_rgb(&out).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn inpaint(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<InpaintResponse>, ApiError> {
    let model = st.loaded().ok_or_else(ApiError::unavailable)?;
    let req: InpaintRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    if let Some(id) = &req.model_id {
        if *id != model.id {
            return Err(ApiError::bad_request(format!("unknown model id `{id}`")));
        }
    }
    let permit = st.permits.clone().acquire_owned().await.map_err(|_| ApiError::unavailable())?;
    let start = Instant::now();
    let m = model.clone();
    let png = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        run_request(&m, &req)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(InpaintResponse {
        image: B64.encode(png),
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
        model_id: model.id.clone(),
    }))
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let limit = state.max_body_bytes;
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub struct ServeOptions {
    pub checkpoint: PathBuf,
    pub addr: SocketAddr,
    pub static_dir: Option<PathBuf>,
    pub workers: usize,
    pub max_body_bytes: usize,
}

/// Binds, starts answering (503 on model routes) and loads the checkpoint
/// in the background. Returns when the server stops or the load fails.
pub async fn serve(opts: ServeOptions) -> anyhow::Result<()> {
    let state = AppState::new(opts.workers, opts.max_body_bytes);
    let app = router(state.clone(), opts.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(opts.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);

    let load_error: Arc<Mutex<Option<anyhow::Error>>> = Arc::default();
    let failed = Arc::new(Notify::new());
    let (st, err, note) = (state.clone(), load_error.clone(), failed.clone());
    let path = opts.checkpoint.clone();
    tokio::task::spawn_blocking(move || match LoadedModel::from_path(&path) {
        Ok(m) => {
            log::info!("model {} loaded from {}", m.id, path.display());
            st.install(m);
        }
        Err(e) => {
            *err.lock().unwrap() = Some(e.context(format!("loading {}", path.display())));
            note.notify_one();
        }
    });

    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = failed.notified() => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        })
        .await?;
    let failure = load_error.lock().unwrap().take();
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
