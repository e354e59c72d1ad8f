//! Sweep execution.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use prompt_artisan::backend::BackendSpec;
use prompt_artisan::sampler::{run_edit, SamplerConfig};
use sha2::{Digest, Sha256};

use crate::case::BenchCase;
use crate::method::MethodConfig;
use crate::report::{CellOutcome, CellReport, MetricReport, ScorerStatus};
use crate::scorer::Scorer;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub backend: BackendSpec,
    /// Settings below every case and method override.
    pub base: SamplerConfig,
    pub workers: usize,
    /// Write each edited image to `DIR/<case>/<method>.png`.
    pub image_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            backend: BackendSpec::Toy { seed: 0 },
            base: SamplerConfig::default(),
            workers: 1,
            image_dir: None,
        }
    }
}

fn fingerprint(cfg: &SamplerConfig, backend: &str) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::new().chain_update(backend).chain_update(json).finalize())
}

struct ActiveScorer<'a> {
    scorer: &'a dyn Scorer,
    unavailable: Option<String>,
}

fn run_cell(
    case: &BenchCase,
    method: &MethodConfig,
    scorers: &[ActiveScorer<'_>],
    opts: &BenchOptions,
    identity: &str,
) -> CellReport {
    let start = Instant::now();
    let mut fp = String::new();
    let outcome = (|| -> Result<CellOutcome, String> {
        let mut request = case.request(&opts.base).map_err(|e| e.to_string())?;
        request.config = method.sampler.apply(&request.config);
        fp = fingerprint(&request.config, identity);
        let mut backend = opts.backend.load(request.dims()).map_err(|e| e.to_string())?;
        let out = run_edit(
            &request,
            &mut *backend.denoiser,
            &*backend.codec,
            &*backend.encoder,
        )
        .map_err(|e| e.to_string())?;
        if let Some(dir) = &opts.image_dir {
            let dir = dir.join(&case.id);
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            out.image
                .save_with_format(dir.join(format!("{}.png", method.name)), image::ImageFormat::Png)
                .map_err(|e| e.to_string())?;
        }
        let mut scores = BTreeMap::new();
        let mut absent = BTreeMap::new();
        for s in scorers {
            let result = match &s.unavailable {
                Some(why) => Err(why.clone()),
                None => s.scorer.score(&out.image, &case.scoring_prompt()),
            };
            match result {
                Ok(v) => scores.extend(v),
                Err(why) => absent.extend(s.scorer.metrics().into_iter().map(|m| (m, why.clone()))),
            }
        }
        Ok(CellOutcome::Ok {
            scores,
            absent,
            stats: out.stats,
            warnings: out.warnings,
        })
    })();
    CellReport {
        case: case.id.clone(),
        method: method.name.clone(),
        config_fingerprint: fp,
        runtime_ms: start.elapsed().as_millis() as u64,
        outcome: outcome.unwrap_or_else(|reason| CellOutcome::Failed { reason }),
    }
}

/// Run every method on every case. Each cell gets a fresh backend instance;
/// a failing or panicking cell is recorded as failed and never touches
/// another cell.
pub fn run_benchmark(
    cases: &[BenchCase],
    methods: &[MethodConfig],
    scorers: &[Box<dyn Scorer>],
    opts: &BenchOptions,
) -> Result<MetricReport, String> {
    if cases.is_empty() {
        return Err("no cases to run".into());
    }
    if methods.is_empty() {
        return Err("no methods to run".into());
    }
    let active: Vec<ActiveScorer<'_>> = scorers
        .iter()
        .map(|s| ActiveScorer {
            scorer: s.as_ref(),
            unavailable: s.check().err(),
        })
        .collect();
    for s in active.iter().filter(|s| s.unavailable.is_some()) {
        tracing::warn!(scorer = s.scorer.name(), reason = s.unavailable.as_deref(), "scorer unavailable");
    }
    let identity = opts.backend.identity();
    let jobs: Vec<(&BenchCase, &MethodConfig)> = cases
        .iter()
        .flat_map(|c| methods.iter().map(move |m| (c, m)))
        .collect();
    let slots: Mutex<Vec<Option<CellReport>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(case, method)) = jobs.get(i) else {
                    break;
                };
                let cell = catch_unwind(AssertUnwindSafe(|| {
                    run_cell(case, method, &active, opts, &identity)
                }))
                .unwrap_or_else(|panic| CellReport {
                    case: case.id.clone(),
                    method: method.name.clone(),
                    config_fingerprint: String::new(),
                    runtime_ms: 0,
                    outcome: CellOutcome::Failed {
                        reason: format!(
                            "panicked: {}",
                            panic
                                .downcast_ref::<&str>()
                                .map(|s| s.to_string())
                                .or_else(|| panic.downcast_ref::<String>().cloned())
                                .unwrap_or_default()
                        ),
                    },
                });
                tracing::info!(case = %cell.case, method = %cell.method, "cell finished");
                slots.lock().expect("no poisoned slots")[i] = Some(cell);
            });
        }
    });
    let cells = slots
        .into_inner()
        .expect("no poisoned slots")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    let statuses = active
        .iter()
        .map(|s| ScorerStatus {
            name: s.scorer.name().to_owned(),
            metrics: s.scorer.metrics(),
            unavailable: s.unavailable.clone(),
        })
        .collect();
    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    Ok(MetricReport::assemble(identity, statuses, &names, cells))
}
