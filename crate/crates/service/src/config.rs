use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use prompt_artisan::backend::BackendSpec;

pub const DEFAULT_MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    pub store: PathBuf,
    pub backend: BackendSpec,
    /// Concurrent jobs. Zero accepts jobs without running them.
    pub workers: usize,
    pub max_payload: usize,
    /// Identical submissions within this window return the existing job.
    pub idempotency_ttl: Duration,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store: PathBuf::from("store"),
            backend: BackendSpec::Toy { seed: 0 },
            workers: 1,
            max_payload: DEFAULT_MAX_PAYLOAD,
            idempotency_ttl: Duration::from_secs(3600),
            cors_origin: None,
        }
    }
}

fn env<T: std::str::FromStr>(name: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match std::env::var(name) {
        Ok(v) => v.parse().map(Some).map_err(|e| format!("{name}={v}: {e}")),
        Err(_) => Ok(None),
    }
}

impl ServiceConfig {
    /// Defaults overridden by `PROMPT_ARTISAN_*` variables: `ADDR`, `STORE`,
    /// `BACKEND`, `TOY_SEED`, `WORKERS`, `MAX_PAYLOAD`, `IDEMPOTENCY_TTL_SECS`,
    /// `CORS_ORIGIN`.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(v) = env("PROMPT_ARTISAN_ADDR")? {
            cfg.addr = v;
        }
        if let Some(v) = env::<String>("PROMPT_ARTISAN_STORE")? {
            cfg.store = v.into();
        }
        let seed = env("PROMPT_ARTISAN_TOY_SEED")?.unwrap_or(0);
        if let Some(name) = env::<String>("PROMPT_ARTISAN_BACKEND")? {
            cfg.backend = BackendSpec::from_name(&name, seed).map_err(|e| e.to_string())?;
        } else {
            cfg.backend = BackendSpec::Toy { seed };
        }
        if let Some(v) = env("PROMPT_ARTISAN_WORKERS")? {
            cfg.workers = v;
        }
        if let Some(v) = env("PROMPT_ARTISAN_MAX_PAYLOAD")? {
            cfg.max_payload = v;
        }
        if let Some(v) = env("PROMPT_ARTISAN_IDEMPOTENCY_TTL_SECS")? {
            cfg.idempotency_ttl = Duration::from_secs(v);
        }
        cfg.cors_origin = env("PROMPT_ARTISAN_CORS_ORIGIN")?;
        Ok(cfg)
    }
}
