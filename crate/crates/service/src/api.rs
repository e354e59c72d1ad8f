use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::error::ApiError;
use crate::jobs::{not_done, JobSpec, Service};
use crate::store::{EditJob, JobError, JobState, Progress};

/// Multipart framing on top of the configured payload limit.
const FRAMING_SLACK: usize = 64 * 1024;

pub fn router(service: Service) -> Router {
    let cfg = service.config();
    let cors = CorsLayer::new()
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([header::HeaderName::from_static("x-content-sha256")]);
    let cors = match cfg.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(AllowOrigin::exact(origin)),
        Some(Err(_)) => {
            tracing::warn!("invalid CORS origin; allowing any");
            cors.allow_origin(Any)
        }
        None => cors.allow_origin(Any),
    };
    let limit = cfg.max_payload + FRAMING_SLACK;
    Router::new()
        .route("/v1/edits", post(submit))
        .route("/v1/edits/{id}", get(status))
        .route("/v1/edits/{id}/result", get(result))
        .route("/v1/edits/{id}/config", get(sidecar))
        .route("/v1/healthz", get(healthz))
        .route("/v1/capabilities", get(capabilities))
        .layer(DefaultBodyLimit::max(limit))
        .layer(cors)
        .with_state(service)
}

#[derive(Serialize)]
struct JobView<'a> {
    id: &'a str,
    state: JobState,
    progress: Progress,
    fingerprint: &'a str,
    created_at: u64,
    started_at: Option<u64>,
    finished_at: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    result_sha256: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a JobError>,
}

impl<'a> From<&'a EditJob> for JobView<'a> {
    fn from(j: &'a EditJob) -> Self {
        Self {
            id: &j.id,
            state: j.state,
            progress: j.progress,
            fingerprint: &j.fingerprint,
            created_at: j.created_at,
            started_at: j.started_at,
            finished_at: j.finished_at,
            result_sha256: j.result.as_ref().map(|r| r.png.as_str()),
            error: j.error.as_ref(),
        }
    }
}

fn multipart_error(e: MultipartError, limit: usize) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(limit)
    } else {
        ApiError::invalid(format!("malformed multipart body: {}", e.body_text()))
    }
}

/// Parts: one `image`, one `mask` per pair in pair order, one `request`.
async fn submit(State(service): State<Service>, headers: HeaderMap, mut form: Multipart) -> Result<Response, ApiError> {
    let limit = service.config().max_payload;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok());
    if declared.is_some_and(|n| n > limit + FRAMING_SLACK) {
        return Err(ApiError::too_large(limit));
    }
    let mut image: Option<Bytes> = None;
    let mut masks = Vec::new();
    let mut spec: Option<JobSpec> = None;
    let mut total = 0usize;
    while let Some(field) = form.next_field().await.map_err(|e| multipart_error(e, limit))? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| multipart_error(e, limit))?;
        total += bytes.len();
        if total > limit {
            return Err(ApiError::too_large(limit));
        }
        match name.as_str() {
            "image" if image.is_none() => image = Some(bytes),
            "mask" => masks.push(bytes.to_vec()),
            "request" if spec.is_none() => {
                let de = &mut serde_json::Deserializer::from_slice(&bytes);
                let parsed = serde_path_to_error::deserialize(de).map_err(|e| {
                    ApiError::invalid(format!("request: {}", e.inner())).with_detail(json!({
                        "field": "request",
                        "path": e.path().to_string(),
                    }))
                })?;
                spec = Some(parsed);
            }
            other => {
                return Err(ApiError::invalid(format!("unexpected or repeated part `{other}`"))
                    .with_detail(json!({ "field": other })))
            }
        }
    }
    let missing = |f: &str| ApiError::invalid(format!("missing `{f}` part")).with_detail(json!({ "field": f }));
    let image = image.ok_or_else(|| missing("image"))?;
    let spec = spec.ok_or_else(|| missing("request"))?;
    let svc = service.clone();
    let (job, existing) = tokio::task::spawn_blocking(move || svc.submit(&image, &masks, spec))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let status = if existing { StatusCode::OK } else { StatusCode::ACCEPTED };
    let body = json!({ "id": job.id, "state": job.state, "existing": existing });
    Ok((status, Json(body)).into_response())
}

fn find(service: &Service, id: &str) -> Result<EditJob, ApiError> {
    service.job(id).ok_or_else(|| ApiError::not_found(id))
}

async fn status(State(service): State<Service>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let job = find(&service, &id)?;
    Ok(Json(json!(JobView::from(&job))))
}

async fn artifact(service: &Service, id: &str, png: bool) -> Result<(String, Vec<u8>), ApiError> {
    let job = find(service, id)?;
    let Some(result) = job.result.as_ref().filter(|_| job.state == JobState::Done) else {
        return Err(not_done(&job));
    };
    let hash = if png { result.png.clone() } else { result.sidecar.clone() };
    let svc = service.clone();
    let h = hash.clone();
    let bytes = tokio::task::spawn_blocking(move || svc.store().blob(&h))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((hash, bytes))
}

async fn result(State(service): State<Service>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (hash, bytes) = artifact(&service, &id, true).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_owned()),
            (header::HeaderName::from_static("x-content-sha256"), hash),
        ],
        bytes,
    )
        .into_response())
}

async fn sidecar(State(service): State<Service>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (_, bytes) = artifact(&service, &id, false).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn healthz(State(service): State<Service>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "queued": service.queued(),
        "workers": service.config().workers,
    }))
}

/// Reference image size for reporting attention resolutions.
const REFERENCE_DIMS: (usize, usize) = (512, 512);

async fn capabilities(State(service): State<Service>) -> Json<Value> {
    let cfg = service.config();
    let backend = cfg.backend.clone();
    let sites = tokio::task::spawn_blocking(move || {
        backend
            .load(REFERENCE_DIMS)
            .map(|b| b.denoiser.attention_sites().to_vec())
            .map_err(|e| e.to_string())
    })
    .await
    .unwrap_or_else(|e| Err(e.to_string()));
    let attention = match sites {
        Ok(sites) => json!({ "reference_dims": REFERENCE_DIMS, "sites": sites }),
        Err(e) => json!({ "reference_dims": REFERENCE_DIMS, "error": e }),
    };
    Json(json!({
        "backends": ["toy", "ip2p"],
        "active_backend": cfg.backend.identity(),
        "limits": {
            "max_payload": cfg.max_payload,
            "workers": cfg.workers,
            "idempotency_ttl_secs": cfg.idempotency_ttl.as_secs(),
            "max_steps": 1000,
        },
        "attention": attention,
    }))
}
