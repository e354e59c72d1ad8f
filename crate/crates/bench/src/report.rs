//! Benchmark reports: the JSON artifact and its Markdown rendering.

use std::collections::BTreeMap;
use std::fmt::Write;

use prompt_artisan::sampler::RunStats;
use serde::{Deserialize, Serialize};

use crate::scorer::Scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerStatus {
    pub name: String,
    pub metrics: Vec<String>,
    /// Why the scorer could not run; `None` when it was available.
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        scores: Scores,
        /// Metrics that could not be computed, with the reason.
        absent: BTreeMap<String, String>,
        stats: RunStats,
        warnings: Vec<String>,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub case: String,
    pub method: String,
    /// SHA-256 of the resolved sampler config and backend identity.
    pub config_fingerprint: String,
    pub runtime_ms: u64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Number of cases that contributed.
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub aggregate: BTreeMap<String, Aggregate>,
    pub failed: usize,
    pub total_runtime_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub backend: String,
    pub scoring_prompt: String,
    pub scorers: Vec<ScorerStatus>,
    pub methods: Vec<MethodSummary>,
    /// Case-major, methods in configured order.
    pub cells: Vec<CellReport>,
}

impl MetricReport {
    /// Assemble summaries from finished cells. Aggregates are arithmetic
    /// means over the cases where the metric is present.
    pub fn assemble(
        backend: String,
        scorers: Vec<ScorerStatus>,
        method_names: &[String],
        cells: Vec<CellReport>,
    ) -> Self {
        let methods = method_names
            .iter()
            .map(|name| {
                let mine: Vec<_> = cells.iter().filter(|c| &c.method == name).collect();
                let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                let mut failed = 0;
                for c in &mine {
                    match &c.outcome {
                        CellOutcome::Ok { scores, .. } => {
                            for (m, v) in scores {
                                let e = sums.entry(m.clone()).or_default();
                                e.0 += v;
                                e.1 += 1;
                            }
                        }
                        CellOutcome::Failed { .. } => failed += 1,
                    }
                }
                MethodSummary {
                    name: name.clone(),
                    aggregate: sums
                        .into_iter()
                        .map(|(m, (sum, n))| (m, Aggregate { mean: sum / n as f64, cases: n }))
                        .collect(),
                    failed,
                    total_runtime_ms: mine.iter().map(|c| c.runtime_ms).sum(),
                }
            })
            .collect();
        Self {
            backend,
            scoring_prompt: "instructions joined by \", \"".into(),
            scorers,
            methods,
            cells,
        }
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.scorers.iter().flat_map(|s| s.metrics.clone()).collect();
        names.dedup();
        names
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let metrics = self.metric_names();
        let mut md = String::new();
        writeln!(md, "# Benchmark report\n").unwrap();
        writeln!(md, "Backend: `{}`", self.backend).unwrap();
        for s in &self.scorers {
            match &s.unavailable {
                None => writeln!(md, "Scorer: `{}` ({})", s.name, s.metrics.join(", ")).unwrap(),
                Some(why) => writeln!(md, "Scorer: `{}` unavailable: {why}", s.name).unwrap(),
            }
        }
        writeln!(md, "\n## Mean scores\n").unwrap();
        writeln!(md, "| method | {} | failed | runtime (ms) |", metrics.join(" | ")).unwrap();
        writeln!(md, "|---|{}---|---|", "---|".repeat(metrics.len())).unwrap();
        for m in &self.methods {
            let cols: Vec<String> = metrics
                .iter()
                .map(|k| {
                    m.aggregate
                        .get(k)
                        .map_or("n/a".to_owned(), |a| format!("{:.4} ({})", a.mean, a.cases))
                })
                .collect();
            writeln!(
                md,
                "| {} | {} | {} | {} |",
                m.name,
                cols.join(" | "),
                m.failed,
                m.total_runtime_ms
            )
            .unwrap();
        }
        writeln!(md, "\n## Cells\n").unwrap();
        writeln!(md, "| case | method | {} | status |", metrics.join(" | ")).unwrap();
        writeln!(md, "|---|---|{}---|", "---|".repeat(metrics.len())).unwrap();
        for c in &self.cells {
            let (cols, status): (Vec<String>, String) = match &c.outcome {
                CellOutcome::Ok { scores, absent, .. } => (
                    metrics
                        .iter()
                        .map(|k| scores.get(k).map_or("n/a".to_owned(), |v| format!("{v:.4}")))
                        .collect(),
                    if absent.is_empty() {
                        "ok".into()
                    } else {
                        format!("ok, {} metric(s) absent", absent.len())
                    },
                ),
                CellOutcome::Failed { reason } => (
                    vec!["n/a".to_owned(); metrics.len()],
                    format!("failed: {}", reason.replace('|', "\\|")),
                ),
            };
            writeln!(md, "| {} | {} | {} | {} |", c.case, c.method, cols.join(" | "), status).unwrap();
        }
        md
    }
}
