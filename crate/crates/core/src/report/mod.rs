//! Run configuration, run records, summary tables, cost accounting and
//! ablation sweeps.

mod config;
mod cost;
mod run;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendConfig;
use crate::search::{PromptSummary, SearchConfig, SearchState};

pub use config::{
    ConfigError, Experiment, RunConfig, SearchSection, SplitConfig, TaskSource, CONFIG_VERSION, DEFAULT_DEV_SIZE,
    DEFAULT_SPLITS,
};
pub use cost::{estimate_cost, CostEstimate, CostModel, REFERENCE_TOTAL};
pub use run::{
    ablate, run_search, run_split, Ablation, AblationAxis, AblationRow, CurvePoint, EventLog, RunError,
    CHECKPOINT_PREFIX, EVENTS_FILE, RECORD_PREFIX, REPORT_FILE,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no run records to report")]
    Empty,
    #[error("run `{0}` has no final prompt")]
    NoResult(String),
    #[error("cannot read record {path}: {message}")]
    Read { path: String, message: String },
}

/// Settings a run was executed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub search: SearchConfig,
    pub backend: BackendConfig,
    pub dev_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub t: usize,
    pub best: f64,
    pub mean: f64,
    pub top_k: Vec<String>,
}

/// Outcome of one search on one data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task: String,
    pub config: ConfigSnapshot,
    pub split_index: usize,
    pub split_seed: u64,
    pub generations: Vec<GenerationStats>,
    /// Best metric among the seed prompts.
    pub seed_best: f64,
    pub final_top_k: Vec<PromptSummary>,
    pub forward_passes: u64,
    pub wall_time_ms: u64,
}

impl RunRecord {
    pub fn from_state(
        state: &SearchState,
        run_id: String,
        split_index: usize,
        wall_time_ms: u64,
        backend: &BackendConfig,
    ) -> Self {
        let generations: Vec<GenerationStats> = state
            .generations
            .iter()
            .map(|g| {
                let (best, mean) = g.summary().unwrap_or((f64::NEG_INFINITY, f64::NEG_INFINITY));
                GenerationStats {
                    t: g.t,
                    best,
                    mean,
                    top_k: g.top_k.clone(),
                }
            })
            .collect();
        Self {
            run_id,
            task: state.task.name.clone(),
            config: ConfigSnapshot {
                search: state.config.clone(),
                backend: backend.clone(),
                dev_size: state.dev.dev.len(),
            },
            split_index,
            split_seed: state.dev.seed,
            seed_best: generations.first().map_or(f64::NEG_INFINITY, |g| g.best),
            generations,
            final_top_k: state
                .result
                .as_deref()
                .unwrap_or_default()
                .iter()
                .map(PromptSummary::from)
                .collect(),
            forward_passes: state.forward_passes,
            wall_time_ms,
        }
    }

    /// Metric of the final top-1 prompt.
    pub fn metric(&self) -> Option<f64> {
        self.final_top_k.first().map(|p| p.metric.value())
    }

    /// Running maximum of the per-generation best metric.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.generations
            .iter()
            .scan(f64::NEG_INFINITY, |best, g| {
                *best = best.max(g.best);
                Some(*best)
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let read_err = |message: String| ReportError::Read {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))
    }
}

/// Render a header and rows as CSV text.
pub(crate) fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).expect("writing to memory cannot fail");
    for row in rows {
        writer.write_record(&row).expect("writing to memory cannot fail");
    }
    let bytes = writer.into_inner().expect("flushing to memory cannot fail");
    String::from_utf8(bytes).expect("fields are UTF-8")
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub seed_mean: f64,
    pub forward_passes_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub const CSV_HEADER: &'static str = "task,runs,mean,std,seed_mean,forward_passes_mean";

    pub fn to_csv(&self) -> String {
        csv_text(
            &Self::CSV_HEADER.split(',').collect::<Vec<_>>(),
            self.rows.iter().map(|r| {
                vec![
                    r.task.clone(),
                    r.runs.to_string(),
                    format!("{:.6}", r.mean),
                    format!("{:.6}", r.std),
                    format!("{:.6}", r.seed_mean),
                    format!("{:.1}", r.forward_passes_mean),
                ]
            }),
        )
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$}  runs  {:>16}  {:>9}  {:>14}\n",
            "task", "metric", "seed", "forward passes"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>4}  {:>8.4} ± {:<6.4}  {:>9.4}  {:>14.0}",
                r.task, r.runs, r.mean, r.std, r.seed_mean, r.forward_passes_mean
            );
        }
        out
    }
}

/// Per-task mean and population std of the final top-1 metric across runs.
pub fn write_report(records: &[RunRecord]) -> Result<Report, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut by_task: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(&r.task).or_default().push(r);
    }
    let rows = by_task
        .into_iter()
        .map(|(task, runs)| {
            let metrics = runs
                .iter()
                .map(|r| r.metric().ok_or_else(|| ReportError::NoResult(r.run_id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            let (mean, std) = mean_std(&metrics);
            let seeds: Vec<f64> = runs.iter().map(|r| r.seed_best).collect();
            let passes: Vec<f64> = runs.iter().map(|r| r.forward_passes as f64).collect();
            Ok(ReportRow {
                task: task.to_string(),
                runs: runs.len(),
                mean,
                std,
                seed_mean: mean_std(&seeds).0,
                forward_passes_mean: mean_std(&passes).0,
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    Ok(Report { rows })
}
