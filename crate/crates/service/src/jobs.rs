//! Job submission, the FIFO queue and the worker pool.

use std::collections::VecDeque;
use std::panic::AssertUnwindSafe;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use axum::http::StatusCode;
use image::RgbImage;
use ndarray::Array2;
use prompt_artisan::imageio::{decode_rgb, encode_png};
use prompt_artisan::mask::decode_mask;
use prompt_artisan::sampler::{run_edit_with, EditRequest, RunOptions, SamplerConfig, SamplerOverrides, StepEvent};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::store::{now_ms, sha256_hex, EditJob, JobError, JobResult, JobState, Store, StoredRequest};

/// One mask-prompt pair; the mask is the multipart `mask` part at the same
/// index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub prompt: String,
    pub order: i64,
    /// Defaults to a group of its own (`index + 1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
}

/// The `request` part of a submission.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub pairs: Vec<PairSpec>,
    /// Applied over the default sampler settings.
    #[serde(default)]
    pub config: SamplerOverrides,
}

impl JobSpec {
    pub fn resolved_config(&self) -> SamplerConfig {
        self.config.apply(&SamplerConfig::default())
    }
}

/// Decoded form of a submission, checked against the edit rules.
fn build_request(image: RgbImage, masks: Vec<Array2<u8>>, spec: &JobSpec) -> EditRequest {
    let pairs = masks.into_iter().zip(&spec.pairs).enumerate().map(|(i, (m, p))| {
        (m, p.prompt.clone(), p.order, p.group.unwrap_or(i as u32 + 1))
    });
    EditRequest::new(image, pairs, spec.resolved_config())
}

struct Shared {
    cfg: ServiceConfig,
    store: Mutex<Store>,
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
}

/// Handle to a running service; clones share the same store and queue.
#[derive(Clone)]
pub struct Service {
    shared: Arc<Shared>,
}

impl Service {
    /// Open the store, requeue interrupted jobs and start `cfg.workers`
    /// worker threads.
    pub fn start(cfg: ServiceConfig) -> std::io::Result<Self> {
        let store = Store::open(&cfg.store)?;
        let queue = store.queued().into_iter().collect();
        let workers = cfg.workers;
        let shared = Arc::new(Shared {
            cfg,
            store: Mutex::new(store),
            queue: Mutex::new(queue),
            ready: Condvar::new(),
        });
        for i in 0..workers {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name(format!("edit-worker-{i}"))
                .spawn(move || worker(&shared))?;
        }
        Ok(Self { shared })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.cfg
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        lock(&self.shared.store)
    }

    pub fn queued(&self) -> usize {
        lock(&self.shared.queue).len()
    }

    pub fn job(&self, id: &str) -> Option<EditJob> {
        self.store().get(id).cloned()
    }

    /// Validate and enqueue a submission. Returns the job and whether it
    /// already existed within the idempotency window.
    pub fn submit(&self, image: &[u8], masks: &[Vec<u8>], spec: JobSpec) -> Result<(EditJob, bool), ApiError> {
        let decoded = decode_rgb(image).map_err(|e| {
            ApiError::invalid(format!("image: {e}")).with_detail(json!({ "field": "image" }))
        })?;
        let dims = (decoded.height() as usize, decoded.width() as usize);
        if masks.len() != spec.pairs.len() {
            return Err(ApiError::invalid(format!(
                "{} masks for {} pairs",
                masks.len(),
                spec.pairs.len()
            ))
            .with_detail(json!({ "field": "mask", "masks": masks.len(), "pairs": spec.pairs.len() })));
        }
        let mut rasters = Vec::with_capacity(masks.len());
        for (i, bytes) in masks.iter().enumerate() {
            let raster = decode_mask(bytes).map_err(|e| {
                ApiError::invalid(format!("mask {i}: {e}")).with_detail(json!({ "mask_index": i }))
            })?;
            if raster.dim() != dims {
                return Err(ApiError::invalid(format!(
                    "mask {i} is {}x{}, image is {}x{}",
                    raster.dim().0,
                    raster.dim().1,
                    dims.0,
                    dims.1
                ))
                .with_detail(json!({
                    "mask_index": i,
                    "expected": [dims.0, dims.1],
                    "actual": [raster.dim().0, raster.dim().1],
                })));
            }
            rasters.push(raster);
        }
        let request = build_request(decoded, rasters, &spec);
        request
            .validate()
            .and_then(|()| self.shared.cfg.backend.check_dims(dims))
            .map_err(|e| ApiError::invalid(e.to_string()))?;

        let mut store = self.store();
        let image_hash = store.put_blob(image)?;
        let mask_hashes = masks.iter().map(|m| store.put_blob(m)).collect::<Result<Vec<_>, _>>()?;
        let fingerprint = fingerprint(
            &self.shared.cfg.backend.identity(),
            &image_hash,
            &mask_hashes,
            &spec,
            &request.config,
        );
        let since = now_ms().saturating_sub(self.shared.cfg.idempotency_ttl.as_millis() as u64);
        if let Some(existing) = store.find_fingerprint(&fingerprint, since) {
            return Ok((existing.clone(), true));
        }
        let stored = StoredRequest {
            image: image_hash,
            masks: mask_hashes,
            spec,
        };
        let job = store.create(fingerprint, stored, request.config.steps)?;
        drop(store);
        lock(&self.shared.queue).push_back(job.id.clone());
        self.shared.ready.notify_one();
        Ok((job, false))
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panicking job is caught inside the worker; poisoning would only come
    // from a bug in the store itself, whose state is still append-consistent.
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn fingerprint(backend: &str, image: &str, masks: &[String], spec: &JobSpec, config: &SamplerConfig) -> String {
    let pairs: Vec<_> = spec
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| json!([p.prompt, p.order, p.group.unwrap_or(i as u32 + 1)]))
        .collect();
    let canonical = json!({
        "backend": backend,
        "image": image,
        "masks": masks,
        "pairs": pairs,
        "config": config,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

fn worker(shared: &Shared) {
    loop {
        let id = {
            let mut q = lock(&shared.queue);
            loop {
                if let Some(id) = q.pop_front() {
                    break id;
                }
                q = shared.ready.wait(q).unwrap_or_else(|e| e.into_inner());
            }
        };
        if let Err(e) = run_job(shared, &id) {
            tracing::error!(%id, "job bookkeeping failed: {e}");
        }
    }
}

fn run_job(shared: &Shared, id: &str) -> std::io::Result<()> {
    let job = lock(&shared.store).update(id, |j| {
        j.state = JobState::Running;
        j.started_at = Some(now_ms());
        j.progress.completed = 0;
    })?;
    tracing::info!(%id, "running");
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| execute(shared, &job)))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "worker panicked".into());
            Err(JobError {
                code: "internal".into(),
                message: msg,
                step: None,
            })
        });
    let mut store = lock(&shared.store);
    match outcome {
        Ok((png, sidecar)) => {
            // Blobs land before the state flips, so DONE always has a result.
            let result = JobResult {
                png: store.put_blob(&png)?,
                sidecar: store.put_blob(&sidecar)?,
            };
            store.update(id, |j| {
                j.state = JobState::Done;
                j.finished_at = Some(now_ms());
                j.progress.completed = j.progress.total;
                j.result = Some(result);
            })?;
            tracing::info!(%id, "done");
        }
        Err(err) => {
            tracing::warn!(%id, code = %err.code, "failed: {}", err.message);
            store.update(id, |j| {
                j.state = JobState::Failed;
                j.finished_at = Some(now_ms());
                j.error = Some(err);
            })?;
        }
    }
    Ok(())
}

fn execute(shared: &Shared, job: &EditJob) -> Result<(Vec<u8>, Vec<u8>), JobError> {
    let fail = |code: &str, message: String, step: Option<usize>| JobError {
        code: code.into(),
        message,
        step,
    };
    let io = |e: std::io::Error| fail("internal", e.to_string(), None);
    let (image, masks) = {
        let store = lock(&shared.store);
        let image = store.blob(&job.request.image).map_err(io)?;
        let masks = job
            .request
            .masks
            .iter()
            .map(|h| store.blob(h))
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?;
        (image, masks)
    };
    let core = |e: prompt_artisan::Error| {
        use prompt_artisan::Error as E;
        let (code, step) = match &e {
            E::InvalidInput(_) | E::Image(_) => ("invalid_input", None),
            E::Backend { step, .. } => ("backend", *step),
            E::NonFinite { step, .. } => ("non_finite", Some(*step)),
            E::Encoder { .. } => ("encoder", None),
            E::Io(_) => ("internal", None),
        };
        fail(code, e.to_string(), step)
    };
    let image = decode_rgb(&image).map_err(core)?;
    let rasters = masks.iter().map(|m| decode_mask(m)).collect::<Result<Vec<_>, _>>().map_err(core)?;
    let request = build_request(image, rasters, &job.request.spec);
    let backend = &shared.cfg.backend;
    let mut loaded = backend.load(request.dims()).map_err(core)?;

    let mut on_step = |ev: &StepEvent<'_>| {
        let completed = ev.completed;
        let r = lock(&shared.store).update(&job.id, |j| j.progress.completed = completed);
        if let Err(e) = r {
            tracing::warn!(id = %job.id, "progress not persisted: {e}");
        }
    };
    let outcome = run_edit_with(
        &request,
        loaded.denoiser.as_mut(),
        loaded.codec.as_ref(),
        loaded.encoder.as_ref(),
        RunOptions {
            record_attention: false,
            on_step: Some(&mut on_step),
        },
    )
    .map_err(core)?;
    let png = encode_png(&outcome.image).map_err(core)?;
    let sidecar = serde_json::to_vec_pretty(&outcome.sidecar(&request, backend.identity()))
        .map_err(|e| fail("internal", e.to_string(), None))?;
    Ok((png, sidecar))
}

/// 409 for jobs without a result yet.
pub(crate) fn not_done(job: &EditJob) -> ApiError {
    let mut err = ApiError::new(
        StatusCode::CONFLICT,
        "not_done",
        format!("job `{}` is {:?}", job.id, job.state),
    )
    .with_detail(json!({ "state": job.state }));
    if let Some(e) = &job.error {
        err.code = "job_failed";
        err.detail = json!({ "state": job.state, "error": e });
    }
    err
}
