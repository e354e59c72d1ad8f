//! Benchmark harness: case directories, scorers and comparison reports.
//!
//! A case directory holds one sub-directory per case, each with a
//! `case.json` manifest next to its image and mask files. Every
//! `(case, method)` cell runs in a fresh backend instance and is scored by
//! every available scorer; a failing cell is recorded and the sweep goes on.

pub mod case;
pub mod fixtures;
pub mod method;
pub mod report;
pub mod run;
pub mod scorer;

pub use case::{load_cases, BenchCase, CaseEdit, CaseError, LoadedCases};
pub use method::{ablation_sweep, BenchConfig, MethodConfig, ScorerConfig};
pub use report::{CellOutcome, CellReport, MetricReport};
pub use run::{run_benchmark, BenchOptions};
pub use scorer::{score_case, CommandScorer, Scorer, ToyScorer};

/// JSON Schema of `case.json`.
pub const CASE_SCHEMA: &str = include_str!("../case.schema.json");

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/benchmark.md")]
mod guide {}
