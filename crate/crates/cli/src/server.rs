//! HTTP service for interactive querying.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lerf_core::provider::TextEmbedder;
use lerf_core::query::{overlay_png_bytes, raster_bytes, DEFAULT_TEMPERATURE};
use lerf_core::render::rgb_png_bytes;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::embedding::{build_context, QuerySource};
use crate::session::{QueryOptions, Session};
use crate::InputError;

struct StoredRaster {
    raster: Vec<u8>,
    overlay: Vec<u8>,
    response: QueryResponse,
}

pub struct AppState {
    pub session: Session,
    pub embedder: Box<dyn TextEmbedder>,
    pub canonical_phrases: Vec<String>,
    pub visibility: bool,
    checkpoint_hash: String,
    renders: RwLock<HashMap<String, Arc<Vec<u8>>>>,
    rasters: RwLock<HashMap<String, Arc<StoredRaster>>>,
}

impl AppState {
    pub fn new(session: Session, embedder: Box<dyn TextEmbedder>, canonical_phrases: Vec<String>, visibility: bool) -> Self {
        let checkpoint_hash = hex(&Sha256::digest(session.checkpoint.to_bytes()));
        Self {
            session,
            embedder,
            canonical_phrases,
            visibility,
            checkpoint_hash,
            renders: RwLock::default(),
            rasters: RwLock::default(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        let msg = format!("{e:#}");
        let status = if e.downcast_ref::<InputError>().is_some() {
            if msg.starts_with("unknown view") {
                StatusCode::NOT_FOUND
            } else {
                StatusCode::BAD_REQUEST
            }
        } else {
            match e.downcast_ref::<lerf_core::Error>() {
                Some(lerf_core::Error::Provider(_)) => StatusCode::BAD_GATEWAY,
                Some(lerf_core::Error::InvalidArgument(_)) => StatusCode::BAD_REQUEST,
                Some(lerf_core::Error::NoVisibleGeometry) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            }
        };
        ApiError(status, msg)
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> anyhow::Result<T> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_step": state.session.checkpoint.step }))
}

async fn views(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let views: Vec<_> = state.session.views.iter().map(|v| v.info()).collect();
    Json(json!({ "views": views }))
}

#[derive(Deserialize)]
struct RenderParams {
    view: String,
}

async fn render(State(state): State<Arc<AppState>>, Query(p): Query<RenderParams>) -> Result<Response, ApiError> {
    let cached = state.renders.read().unwrap().get(&p.view).cloned();
    let png = match cached {
        Some(png) => png,
        None => {
            let st = state.clone();
            let view = p.view.clone();
            let png = blocking(move || {
                let k = st.session.view(&view)?.camera.intrinsics;
                let rgb = st.session.render_rgb(&view)?;
                Ok(Arc::new(rgb_png_bytes(k.width, k.height, &rgb)?))
            })
            .await?;
            state.renders.write().unwrap().insert(p.view, png.clone());
            png
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryBody {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    pub view: String,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub canonicals: Option<Vec<String>>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryResponse {
    pub view: String,
    pub max_score: Option<f64>,
    pub argmax: Option<[u32; 2]>,
    pub selected_scale: f64,
    pub scale_source: &'static str,
    pub raster_url: String,
    pub overlay_url: String,
    pub width: u32,
    pub height: u32,
}

fn run_query(state: &AppState, body: QueryBody, id: String) -> anyhow::Result<StoredRaster> {
    state.session.view(&body.view)?;
    let source = match (body.text, body.embedding) {
        (_, Some(vector)) => QuerySource::Embedding {
            label: "embedding".into(),
            vector,
        },
        (Some(text), None) => QuerySource::Text(text),
        (None, None) => unreachable!("validated by the handler"),
    };
    let phrases = body.canonicals.unwrap_or_else(|| state.canonical_phrases.clone());
    let ctx = build_context(
        source,
        &phrases,
        state.embedder.as_ref(),
        body.temperature.unwrap_or(DEFAULT_TEMPERATURE),
    )?;
    let opts = QueryOptions {
        scale: body.scale,
        visibility: state.visibility,
        ..QueryOptions::default()
    };
    let out = state.session.query(&body.view, &ctx, &opts)?;
    let side = out.sidecar(&ctx);
    Ok(StoredRaster {
        raster: raster_bytes(&out.map),
        overlay: overlay_png_bytes(&out.map)?,
        response: QueryResponse {
            view: side.view,
            max_score: side.max_score,
            argmax: side.argmax,
            selected_scale: side.selected_scale,
            scale_source: out.scale_source.as_str(),
            raster_url: format!("/rasters/{id}"),
            overlay_url: format!("/rasters/{id}/overlay"),
            width: side.width,
            height: side.height,
        },
    })
}

async fn query(State(state): State<Arc<AppState>>, Json(body): Json<QueryBody>) -> Result<Json<QueryResponse>, ApiError> {
    match (&body.text, &body.embedding) {
        (Some(t), None) if t.trim().is_empty() => return Err(bad_request("query text is empty")),
        (None, None) => return Err(bad_request("request needs 'text' or 'embedding'")),
        (Some(_), Some(_)) => return Err(bad_request("send either 'text' or 'embedding', not both")),
        _ => {}
    }
    if body.canonicals.as_ref().is_some_and(|c| c.is_empty() || c.iter().any(|s| s.trim().is_empty())) {
        return Err(bad_request("canonical phrases must be non-empty"));
    }
    let key = serde_json::to_vec(&(&state.checkpoint_hash, state.visibility, &body)).expect("serializable");
    let id = hex(&Sha256::digest(key)[..12]);
    if let Some(hit) = state.rasters.read().unwrap().get(&id) {
        return Ok(Json(hit.response.clone()));
    }
    let st = state.clone();
    let rid = id.clone();
    let stored = blocking(move || run_query(&st, body, rid)).await?;
    let response = stored.response.clone();
    state.rasters.write().unwrap().insert(id, Arc::new(stored));
    Ok(Json(response))
}

fn stored(state: &AppState, id: &str) -> Result<Arc<StoredRaster>, ApiError> {
    state
        .rasters
        .read()
        .unwrap()
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no raster '{id}'")))
}

async fn raster(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let r = stored(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], r.raster.clone()).into_response())
}

async fn overlay(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let r = stored(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], r.overlay.clone()).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/views", get(views))
        .route("/render", get(render))
        .route("/query", post(query))
        .route("/rasters/:id", get(raster))
        .route("/rasters/:id/overlay", get(overlay))
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}

/// Serves until SIGINT or SIGTERM.
pub fn serve(state: AppState, listener: std::net::TcpListener) -> anyhow::Result<()> {
    listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(shutdown_signal())
            .await?;
        Ok(())
    })
}
