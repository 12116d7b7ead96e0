//! Executing searches over data splits, the event log and ablation sweeps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, Experiment};
use super::{csv_text, mean_std, write_report, ReportError, RunRecord};
use crate::backend::LanguageModel;
use crate::hash::fnv1a;
use crate::search::{drive, load_checkpoint, save_checkpoint, Event, SearchError, SearchState};
use crate::task::DataSplit;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const RECORD_PREFIX: &str = "run-split";
pub const CHECKPOINT_PREFIX: &str = "checkpoint-split";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn is_backend_fatal(&self) -> bool {
        matches!(self, RunError::Search(SearchError::BackendFatal(_)))
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RunError::Config(_) | RunError::Search(SearchError::InvalidConfig(_) | SearchError::InvalidSeedPrompt(_))
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Append-only JSONL log. Each line is an [`Event`] with `ts` (seconds since
/// the epoch) and `split` fields added.
pub struct EventLog {
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl EventLog {
    pub fn disabled() -> Self {
        Self { sink: None }
    }

    pub fn open(path: &Path, append: bool) -> Result<Self, RunError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            sink: Some((path.to_path_buf(), BufWriter::new(file))),
        })
    }

    pub fn write(&mut self, split: usize, event: &Event) -> Result<(), RunError> {
        let Some((path, writer)) = &mut self.sink else {
            return Ok(());
        };
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or_default();
        let mut value = serde_json::to_value(event).expect("events serialize to JSON objects");
        if let Some(obj) = value.as_object_mut() {
            obj.insert("ts".into(), ts.into());
            obj.insert("split".into(), split.into());
        }
        writeln!(writer, "{value}")
            .and_then(|_| writer.flush())
            .map_err(io_err(path))
    }
}

fn run_id(exp: &Experiment, split_index: usize, split_seed: u64) -> String {
    let snapshot = serde_json::to_string(&exp.config).unwrap_or_default();
    let h = fnv1a(&format!("{snapshot}#{split_index}#{split_seed}"));
    format!("{}-split{split_index}-{h:016x}", exp.task.name)
}

/// Search one split to completion. With `out` set, a checkpoint is written
/// after every step and the record is saved as `run-split{i}.json`.
pub fn run_split(
    exp: &Experiment,
    split_index: usize,
    dev: &DataSplit,
    backend: &dyn LanguageModel,
    out: Option<&Path>,
    log: &mut EventLog,
    resume: Option<SearchState>,
) -> Result<RunRecord, RunError> {
    let started = Instant::now();
    let mut state = match resume {
        Some(state) => state,
        None => SearchState::new(
            &exp.config.search_config(),
            exp.task.clone(),
            dev.clone(),
            exp.seeds.clone(),
        )?,
    };
    let checkpoint = out.map(|dir| dir.join(format!("{CHECKPOINT_PREFIX}{split_index}.json")));
    let mut log_error = None;
    drive(&mut state, backend, |s, events| {
        for event in events {
            if let Err(e) = log.write(split_index, event) {
                log_error.get_or_insert(e);
            }
        }
        match &checkpoint {
            Some(path) => save_checkpoint(s, path),
            None => Ok(()),
        }
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }
    let wall = started.elapsed().as_millis() as u64;
    let record = RunRecord::from_state(
        &state,
        run_id(exp, split_index, dev.seed),
        split_index,
        wall,
        &exp.config.backend,
    );
    if let Some(dir) = out {
        let path = dir.join(format!("{RECORD_PREFIX}{split_index}.json"));
        let text = serde_json::to_string_pretty(&record).expect("records serialize");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    info!(
        "split {split_index}: final metric {:?} after {} forward passes",
        record.metric(),
        record.forward_passes
    );
    Ok(record)
}

/// Run every configured split. When `resume` is given, splits whose record
/// already exists in `out` are loaded instead of rerun, and the split whose
/// dev set matches the checkpoint continues from it.
pub fn run_search(
    exp: &Experiment,
    backend: &dyn LanguageModel,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Vec<RunRecord>, RunError> {
    let splits = exp.splits()?;
    let mut pending = resume.map(load_checkpoint).transpose()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = match out {
        Some(dir) => EventLog::open(&dir.join(EVENTS_FILE), resume.is_some())?,
        None => EventLog::disabled(),
    };
    let mut records = Vec::with_capacity(splits.len());
    for (i, dev) in splits.iter().enumerate() {
        if resume.is_some() {
            if let Some(dir) = out {
                let path = dir.join(format!("{RECORD_PREFIX}{i}.json"));
                if path.exists() {
                    records.push(RunRecord::load(&path)?);
                    continue;
                }
            }
        }
        let state = match pending.take() {
            Some(s) if &s.dev == dev => Some(s),
            other => {
                pending = other;
                None
            }
        };
        records.push(run_split(exp, i, dev, backend, out, &mut log, state)?);
    }
    if let Some(dir) = out {
        let path = dir.join(REPORT_FILE);
        fs::write(&path, write_report(&records)?.to_csv()).map_err(io_err(&path))?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Dev split size; values in 8..=128.
    ValSize,
    /// Search iterations `T`; values in 0..=9.
    Iterations,
}

impl AblationAxis {
    pub fn range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            AblationAxis::ValSize => 8..=128,
            AblationAxis::Iterations => 0..=9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::ValSize => "val_size",
            AblationAxis::Iterations => "iterations",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "val_size" => Ok(AblationAxis::ValSize),
            "iterations" => Ok(AblationAxis::Iterations),
            other => Err(format!(
                "unknown ablation axis `{other}` (expected val_size or iterations)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub seed_mean: f64,
}

/// Best metric seen up to generation `t` of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub value: usize,
    pub split: usize,
    pub t: usize,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub curves: Vec<CurvePoint>,
}

impl Ablation {
    pub fn to_csv(&self) -> String {
        csv_text(
            &[self.axis.name(), "runs", "mean", "std", "seed_mean"],
            self.rows.iter().map(|r| {
                vec![
                    r.value.to_string(),
                    r.runs.to_string(),
                    format!("{:.6}", r.mean),
                    format!("{:.6}", r.std),
                    format!("{:.6}", r.seed_mean),
                ]
            }),
        )
    }

    pub fn curves_csv(&self) -> String {
        csv_text(
            &[self.axis.name(), "split", "t", "best_so_far"],
            self.curves.iter().map(|p| {
                vec![
                    p.value.to_string(),
                    p.split.to_string(),
                    p.t.to_string(),
                    format!("{:.6}", p.best_so_far),
                ]
            }),
        )
    }
}

/// One full multi-split search per value along `axis`, all other settings
/// (including seeds) held fixed. With `parallel`, values run concurrently;
/// results are still reported in value order.
pub fn ablate(
    exp: &Experiment,
    backend: &dyn LanguageModel,
    axis: AblationAxis,
    values: &[usize],
    parallel: bool,
) -> Result<Ablation, RunError> {
    let mut variants = Vec::with_capacity(values.len());
    for &value in values {
        if !axis.range().contains(&value) {
            return Err(
                ConfigError::Invalid(format!("{} value {value} outside {:?}", axis.name(), axis.range())).into(),
            );
        }
        let mut variant = exp.clone();
        match axis {
            AblationAxis::ValSize => variant.config.split.total = value,
            AblationAxis::Iterations => variant.config.search.iterations = value,
        }
        variant
            .config
            .search_config()
            .resolve(variant.seeds.len())
            .map_err(ConfigError::from)?;
        variants.push((value, variant));
    }

    let run = |variant: &Experiment| run_search(variant, backend, None, None);
    let results: Vec<Result<Vec<RunRecord>, RunError>> = if parallel {
        thread::scope(|scope| {
            let handles: Vec<_> = variants.iter().map(|(_, v)| scope.spawn(move || run(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        variants.iter().map(|(_, v)| run(v)).collect()
    };

    let mut rows = Vec::with_capacity(values.len());
    let mut curves = Vec::new();
    for ((value, _), result) in variants.iter().zip(results) {
        let records = result?;
        let metrics = records
            .iter()
            .map(|r| r.metric().ok_or_else(|| ReportError::NoResult(r.run_id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let (mean, std) = mean_std(&metrics);
        let seeds: Vec<f64> = records.iter().map(|r| r.seed_best).collect();
        rows.push(AblationRow {
            value: *value,
            runs: records.len(),
            mean,
            std,
            seed_mean: mean_std(&seeds).0,
        });
        for r in &records {
            curves.extend(
                r.best_so_far()
                    .into_iter()
                    .enumerate()
                    .map(|(t, best_so_far)| CurvePoint {
                        value: *value,
                        split: r.split_index,
                        t,
                        best_so_far,
                    }),
            );
        }
    }
    Ok(Ablation { axis, rows, curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockModel;
    use crate::mutation::{MutationConfig, Operator};
    use crate::report::{RunConfig, SearchSection, SplitConfig, TaskSource, CONFIG_VERSION};
    use crate::task::TaskSpec;
    use std::collections::{BTreeMap, BTreeSet};

    fn experiment(dir: &Path) -> Experiment {
        let rows: String = (0..80)
            .map(|i| {
                format!(
                    "{{\"id\":\"r{i:02}\",\"values\":{{\"x\":\"item {i}\"}},\"gold\":{}}}\n",
                    i % 2
                )
            })
            .collect();
        let data = dir.join("toy.jsonl");
        fs::write(&data, rows).unwrap();
        let config = RunConfig {
            version: CONFIG_VERSION,
            task: TaskSource::Inline(TaskSpec {
                name: "toy".into(),
                input_fields: BTreeMap::from([("x".to_string(), String::new())]),
                control_fields: BTreeSet::new(),
                answer_choices: Some(vec!["yes".into(), "no".into()]),
                choice_field: None,
                num_classes: 2,
                required_placeholders: BTreeSet::from(["x".to_string()]),
            }),
            dataset: data,
            prompts: vec![
                "Select the most plausible answer for {{x}}".into(),
                "Read the passage {{x}} and say yes or no".into(),
            ],
            split: SplitConfig {
                total: 8,
                n_splits: 2,
                base_seed: 1,
            },
            backend: crate::backend::BackendConfig::mock(),
            search: SearchSection {
                iterations: 2,
                pool_size: 6,
                ..SearchSection::default()
            },
            mutation: MutationConfig::new(Operator::SentenceContinuation),
        };
        Experiment::from_config(config, dir).unwrap()
    }

    fn strip_ts(log: &str) -> Vec<serde_json::Value> {
        log.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("ts");
                v
            })
            .collect()
    }

    #[test]
    fn search_writes_artifacts_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let exp = experiment(dir.path());
        let backend = MockModel::default();
        let out = dir.path().join("out");
        let records = run_search(&exp, &backend, Some(&out), None).unwrap();
        assert_eq!(records.len(), 2);
        for name in [
            EVENTS_FILE,
            REPORT_FILE,
            "run-split0.json",
            "run-split1.json",
            "checkpoint-split1.json",
        ] {
            assert!(out.join(name).exists(), "{name}");
        }
        let log = fs::read_to_string(out.join(EVENTS_FILE)).unwrap();
        // 3 scored generations, 2 bred pools and one rerank per split.
        assert_eq!(log.lines().count(), 2 * 6);

        let again = dir.path().join("again");
        run_search(&exp, &backend, Some(&again), None).unwrap();
        assert_eq!(
            strip_ts(&log),
            strip_ts(&fs::read_to_string(again.join(EVENTS_FILE)).unwrap())
        );

        // Interrupt split 1 after its first step and resume.
        let resumed = dir.path().join("resumed");
        fs::create_dir_all(&resumed).unwrap();
        fs::copy(out.join("run-split0.json"), resumed.join("run-split0.json")).unwrap();
        let splits = exp.splits().unwrap();
        let mut state = SearchState::new(
            &exp.config.search_config(),
            exp.task.clone(),
            splits[1].clone(),
            exp.seeds.clone(),
        )
        .unwrap();
        crate::search::step(&mut state, &backend).unwrap();
        let ckpt = resumed.join("checkpoint-split1.json");
        save_checkpoint(&state, &ckpt).unwrap();
        let finished = run_search(&exp, &backend, Some(&resumed), Some(&ckpt)).unwrap();
        assert_eq!(finished[1].final_top_k, records[1].final_top_k);
        assert_eq!(finished[1].forward_passes, records[1].forward_passes);
    }

    #[test]
    fn ablation_rows_and_monotone_curves() {
        let dir = tempfile::tempdir().unwrap();
        let exp = experiment(dir.path());
        let backend = MockModel::default();
        let ab = ablate(&exp, &backend, AblationAxis::Iterations, &[0, 1, 2], false).unwrap();
        assert_eq!(ab.rows.len(), 3);
        assert_eq!(ab.rows[0].mean, ab.rows[0].seed_mean);
        assert!(ab.rows.windows(2).all(|w| w[1].mean >= w[0].mean));
        let par = ablate(&exp, &backend, AblationAxis::Iterations, &[0, 1, 2], true).unwrap();
        assert_eq!(par.to_csv(), ab.to_csv());
        assert_eq!(ab.to_csv().lines().count(), 4);
        assert!(ablate(&exp, &backend, AblationAxis::ValSize, &[4], false).is_err());
    }
}
