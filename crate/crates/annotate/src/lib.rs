//! HTTP backend for staged gaze annotation: a preliminary label per face is
//! refined on the normalized crop, then confirmed in the full image.

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

pub use store::{CropView, FaceDetail, FaceView, GazeEdit, ImageSummary, ImportReport, Store, StoreError};

const NDJSON: &str = "application/x-ndjson";

pub struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let (status, issues) = match &e {
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, None),
            StoreError::Conflict { .. } => (StatusCode::CONFLICT, None),
            StoreError::StageConflicts(i) => (StatusCode::CONFLICT, Some(i.clone())),
            StoreError::Invalid(_) | StoreError::Crop { .. } => (StatusCode::UNPROCESSABLE_ENTITY, None),
            StoreError::Issues(i) => (StatusCode::UNPROCESSABLE_ENTITY, Some(i.clone())),
            StoreError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        let body = match issues {
            Some(issues) => json!({ "error": e.to_string(), "issues": issues }),
            None => json!({ "error": e.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<Store>;

async fn list_images(State(s): State<Shared>) -> Json<Vec<ImageSummary>> {
    Json(s.images())
}

async fn image_faces(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Vec<FaceView>>> {
    Ok(Json(s.faces(&id)?))
}

async fn image_file(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let path = s.image_path(&id)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| StoreError::Core(gazeswap_core::Error::io(&path, e)))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn face(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<FaceDetail>> {
    let detail = tokio::task::spawn_blocking(move || s.detail(&id))
        .await
        .expect("face detail task panicked")?;
    Ok(Json(detail))
}

async fn face_crop(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let png = tokio::task::spawn_blocking(move || s.crop_png(&id))
        .await
        .expect("crop task panicked")?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn put_gaze(
    State(s): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<gazeswap_core::dataset_io::AnnotationRecord>> {
    let edit: GazeEdit =
        serde_json::from_slice(&body).map_err(|e| StoreError::Invalid(format!("bad gaze edit: {e}")))?;
    let rec = tokio::task::spawn_blocking(move || s.put_gaze(&id, edit))
        .await
        .expect("write task panicked")?;
    Ok(Json(rec))
}

async fn import(State(s): State<Shared>, body: Bytes) -> ApiResult<Json<ImportReport>> {
    let report = tokio::task::spawn_blocking(move || s.import(&body))
        .await
        .expect("import task panicked")?;
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn export(State(s): State<Shared>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let text = match q.format.as_deref() {
        None | Some("labels") => s.export_labels()?,
        Some("annotations") => s.export_annotations()?,
        Some(other) => {
            return Err(StoreError::Invalid(format!(
                "unknown export format '{other}' (expected labels or annotations)"
            ))
            .into())
        }
    };
    Ok(([(header::CONTENT_TYPE, NDJSON)], text).into_response())
}

/// The API routes, plus the UI bundle at `/` when `ui_dir` is given.
pub fn router(store: Shared, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}/faces", get(image_faces))
        .route("/images/{id}/image", get(image_file))
        .route("/faces/{id}", get(face))
        .route("/faces/{id}/crop", get(face_crop))
        .route("/faces/{id}/gaze", put(put_gaze))
        .route("/import", post(import))
        .route("/export", get(export))
        .with_state(store);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, store: Shared, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
