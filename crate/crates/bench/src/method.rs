//! Methods file: which backend, scorers and sampler variants to sweep.
//!
//! ```yaml
//! backend: toy
//! toy_seed: 0
//! workers: 2
//! sampler: { steps: 10 }
//! scorers:
//!   - kind: toy
//!   - kind: command
//!     name: clip-vit-l14
//!     program: clip-score
//!     metrics: [clip_score]
//! methods:
//!   - name: full
//!   - name: no-self
//!     sampler: { cacm: { enable_self: false } }
//! ```
//!
//! Sampler settings stack in the order defaults, file-level `sampler`, the
//! case's own overrides, then the method's overrides.

use std::path::Path;

use prompt_artisan::cacm::CacmConfig;
use prompt_artisan::sampler::SamplerOverrides;
use serde::{Deserialize, Serialize};

use crate::scorer::{CommandScorer, Scorer, ToyScorer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default)]
    pub sampler: SamplerOverrides,
}

impl MethodConfig {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            sampler: SamplerOverrides::default(),
        }
    }

    fn with_cacm(name: &str, f: impl FnOnce(&mut CacmConfig)) -> Self {
        let mut cacm = CacmConfig::default();
        f(&mut cacm);
        Self {
            name: name.into(),
            sampler: SamplerOverrides {
                cacm: Some(cacm),
                ..Default::default()
            },
        }
    }
}

/// The four attention-control arms: everything on, then one control off each.
pub fn ablation_sweep() -> Vec<MethodConfig> {
    vec![
        MethodConfig::with_cacm("full", |_| {}),
        MethodConfig::with_cacm("no-self", |c| c.enable_self = false),
        MethodConfig::with_cacm("no-cross", |c| c.enable_cross = false),
        MethodConfig::with_cacm("no-boost", |c| c.enable_boost = false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerConfig {
    Toy {
        #[serde(default)]
        seed: u64,
    },
    Command(CommandScorer),
}

impl ScorerConfig {
    pub fn build(&self) -> Box<dyn Scorer> {
        match self {
            Self::Toy { seed } => Box::new(ToyScorer::new(*seed)),
            Self::Command(c) => Box::new(c.clone()),
        }
    }
}

fn default_backend() -> String {
    "toy".into()
}

fn default_workers() -> usize {
    1
}

fn default_scorers() -> Vec<ScorerConfig> {
    vec![ScorerConfig::Toy { seed: 0 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub toy_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub sampler: SamplerOverrides,
    #[serde(default = "default_scorers")]
    pub scorers: Vec<ScorerConfig>,
    /// Empty means the ablation sweep.
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            toy_seed: 0,
            workers: default_workers(),
            sampler: SamplerOverrides::default(),
            scorers: default_scorers(),
            methods: Vec::new(),
        }
    }
}

impl BenchConfig {
    pub fn from_yaml(text: &str) -> Result<Self, String> {
        let de = serde_yaml::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| format!("at `{}`: {}", e.path(), e.inner()))?;
        if cfg.methods.is_empty() {
            cfg.methods = ablation_sweep();
        }
        if cfg.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        let mut names: Vec<_> = cfg.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate method name `{}`", w[0]));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_yaml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_has_four_arms() {
        let arms = ablation_sweep();
        let names: Vec<_> = arms.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["full", "no-self", "no-cross", "no-boost"]);
        let flags: Vec<_> = arms
            .iter()
            .map(|m| {
                let c = m.sampler.cacm.as_ref().unwrap();
                (c.enable_self, c.enable_cross, c.enable_boost)
            })
            .collect();
        assert_eq!(
            flags,
            [(true, true, true), (false, true, true), (true, false, true), (true, true, false)]
        );
    }

    #[test]
    fn parses_documented_example() {
        let doc = include_str!("method.rs");
        let yaml: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```yaml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").strip_prefix(' ').unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = BenchConfig::from_yaml(&yaml).unwrap();
        assert_eq!(cfg.workers, 2);
        assert_eq!(cfg.scorers.len(), 2);
        assert_eq!(cfg.methods[1].sampler.cacm.as_ref().map(|c| c.enable_self), Some(false));
        assert_eq!(cfg.sampler.steps, Some(10));
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = BenchConfig::from_yaml("{}").unwrap();
        assert_eq!(cfg.methods, ablation_sweep());
        assert_eq!(cfg.scorers, default_scorers());
        let err = BenchConfig::from_yaml("methods:\n  - name: a\n    sampler: { stpes: 3 }\n").unwrap_err();
        assert!(err.contains("methods[0].sampler"), "{err}");
        assert!(BenchConfig::from_yaml("methods: [{name: a}, {name: a}]").is_err());
        assert!(BenchConfig::from_yaml("workers: 0").is_err());
    }
}
