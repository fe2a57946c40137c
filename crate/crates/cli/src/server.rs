//! HTTP inference service.
//!
//! ```text
//! GET  /api/health    {"status", "model_version", "classes_supported"}
//! POST /api/predict   multipart: `image` file, optional `classes` (2 or 3)
//! GET  /              web UI
//! ```
//!
//! Errors are JSON `{"error": code, "message": text}`; 500s add an `id`
//! that also appears in the log.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dermo_core::infer::predict as run_predict;
use dermo_core::net::DermoNet;
use dermo_core::rng::mix64;
use dermo_core::weights::load_weights;
use log::{debug, error, info};
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::upload::decode_image;

const INDEX_HTML: &str = include_str!("../static/index.html");

/// Version string of a segmentation and recognition pair.
pub fn combined_version(seg: &str, cls: &str) -> String {
    format!("{seg}+{cls}")
}

struct Classifier {
    net: DermoNet,
    version: String,
}

/// One segmentation network and recognition networks keyed by class count.
pub struct Models {
    seg: DermoNet,
    seg_version: String,
    classifiers: BTreeMap<usize, Classifier>,
    default_classes: usize,
}

impl Models {
    /// The first classifier answers requests that do not name a class count.
    pub fn new(seg: (DermoNet, String), classifiers: Vec<(DermoNet, String)>) -> anyhow::Result<Self> {
        let Some(default_classes) = classifiers.first().map(|(n, _)| n.config.num_classes) else {
            bail!("at least one recognition network is required");
        };
        let mut map = BTreeMap::new();
        for (net, version) in classifiers {
            let c = net.config.num_classes;
            if map.insert(c, Classifier { net, version }).is_some() {
                bail!("two recognition networks with {c} classes");
            }
        }
        Ok(Models {
            seg: seg.0,
            seg_version: seg.1,
            classifiers: map,
            default_classes,
        })
    }

    pub fn load(seg: &Path, classifiers: &[PathBuf]) -> anyhow::Result<Self> {
        let load = |p: &Path| load_weights(p).with_context(|| format!("loading weights {}", p.display()));
        let cls = classifiers.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
        Models::new(load(seg)?, cls)
    }

    pub fn classes_supported(&self) -> Vec<usize> {
        self.classifiers.keys().copied().collect()
    }

    fn version(&self, classes: usize) -> String {
        combined_version(&self.seg_version, &self.classifiers[&classes].version)
    }
}

pub struct ServerConfig {
    pub max_upload_bytes: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_upload_bytes: 10 * 1024 * 1024,
            static_dir: None,
        }
    }
}

struct AppState {
    models: Models,
    faults: AtomicU64,
    salt: u64,
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            id: None,
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
            id: self.id.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn router(models: Models, config: &ServerConfig) -> Router {
    let salt = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let state = Arc::new(AppState {
        models,
        faults: AtomicU64::new(0),
        salt,
    });
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/predict", post(predict))
        .layer(DefaultBodyLimit::max(config.max_upload_bytes))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    }
}

pub async fn serve(addr: SocketAddr, models: Models, config: ServerConfig) -> anyhow::Result<()> {
    let classes = models.classes_supported();
    let app = router(models, &config);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    info!("serving on http://{} (classes {:?})", listener.local_addr()?, classes);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        })
        .await?;
    Ok(())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = &state.models;
    Json(json!({
        "status": "ok",
        "model_version": m.version(m.default_classes),
        "classes_supported": m.classes_supported(),
    }))
}

async fn predict(
    State(state): State<Arc<AppState>>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let started = Instant::now();
    let mut multipart = multipart.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let mut image = None;
    let mut classes = None;
    loop {
        let field = multipart.next_field().await.map_err(multipart_error)?;
        let Some(field) = field else { break };
        match field.name() {
            Some("image") => image = Some(field.bytes().await.map_err(multipart_error)?),
            Some("classes") => classes = Some(field.text().await.map_err(multipart_error)?),
            _ => {}
        }
    }
    let models = &state.models;
    let classes = match classes {
        None => models.default_classes,
        Some(text) => match text.trim().parse::<usize>() {
            Ok(c @ (2 | 3)) => c,
            _ => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "bad_class_count",
                    format!("classes must be 2 or 3, got {text:?}"),
                ))
            }
        },
    };
    if !models.classifiers.contains_key(&classes) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "classes_unavailable",
            format!("no recognition weights for {classes} classes; loaded {:?}", models.classes_supported()),
        ));
    }
    let bytes = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "no `image` field"))?;
    let img = decode_image(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "undecodable_image", e))?;
    let (h, w) = (img.height(), img.width());

    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || {
        let m = &worker.models;
        run_predict(&m.seg, &m.classifiers[&classes].net, &img).map(|p| p.response(&m.version(classes)))
    })
    .await;
    let response = match result {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => return Err(internal(&state, &e)),
        Err(e) => return Err(internal(&state, &e)),
    };
    debug!("predict {h}x{w} classes={classes} in {:?}", started.elapsed());
    Ok(Json(response).into_response())
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    let status = e.status();
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, "payload_too_large", e.body_text())
    } else {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

fn internal(state: &AppState, e: &dyn std::fmt::Display) -> ApiError {
    let n = state.faults.fetch_add(1, Ordering::Relaxed);
    let id = format!("{:016x}", mix64(state.salt ^ n));
    error!("internal error {id}: {e}");
    ApiError {
        id: Some(id),
        ..ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
    }
}
