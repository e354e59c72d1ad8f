//! HTTP service wrapping the editing pipeline.
//!
//! Jobs are accepted as multipart uploads, queued FIFO, executed by a fixed
//! pool of workers (one backend instance each) and persisted in a
//! filesystem store, so a restart resumes where the previous process
//! stopped.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /v1/edits` | submit: `image` PNG, one `mask` PNG per pair, `request` JSON |
//! | `GET /v1/edits/{id}` | state and progress |
//! | `GET /v1/edits/{id}/result` | edited PNG |
//! | `GET /v1/edits/{id}/config` | sidecar JSON of the resolved config |
//! | `GET /v1/healthz` | liveness |
//! | `GET /v1/capabilities` | backends, limits, attention resolutions |
//!
//! Errors use the envelope `{"code", "message", "detail"}`.

mod api;
mod config;
mod error;
mod jobs;
mod store;

pub use api::router;
pub use config::ServiceConfig;
pub use error::ApiError;
pub use jobs::{JobSpec, PairSpec, Service};
pub use store::{EditJob, JobError, JobResult, JobState, Progress, Store, StoredRequest};

/// Bind `cfg.addr` and serve until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let service = Service::start(cfg.clone())?;
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, store = %cfg.store.display(), "serving");
    axum::serve(listener, router(service)).await
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod guide {}
