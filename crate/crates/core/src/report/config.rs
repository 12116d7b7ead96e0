//! Versioned JSON run configuration.
//!
//! ```json
//! {
//!   "version": 1,
//!   "task": "cb.task.json",
//!   "dataset": "cb.jsonl",
//!   "prompts": ["{{premise}} Are we justified in saying that \"{{hypothesis}}\"? Yes, no, or maybe?"],
//!   "split": {"total": 32, "n_splits": 3, "base_seed": 0},
//!   "backend": {"kind": "mock"},
//!   "search": {"iterations": 6, "pool_size": 30, "seed": 0},
//!   "mutation": {"operator": "sentence_continuation"}
//! }
//! ```
//!
//! `task` is either a path to a task-spec file or the spec inline. Relative
//! paths are resolved against the directory holding the config file. Auth
//! tokens never live in the file: `backend.auth_env` names the environment
//! variable to read instead.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendConfig, BackendError};
use crate::mutation::MutationConfig;
use crate::scoring::ScorerKind;
use crate::search::{SearchConfig, SearchError, DEFAULT_ITERATIONS, DEFAULT_POOL_SIZE};
use crate::task::{load_dataset, make_splits, DataError, DataSplit, Example, TaskSpec};
use crate::template::{parse_template, validate_for_task, Template, TemplateError};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_DEV_SIZE: usize = 32;
pub const DEFAULT_SPLITS: usize = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON for the schema: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("prompt {index} does not parse: {source}")]
    Prompt {
        index: usize,
        #[source]
        source: TemplateError,
    },
    #[error("prompt {0} does not fit the task schema")]
    PromptSchema(usize),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSource {
    File(PathBuf),
    Inline(TaskSpec),
}

fn default_dev_size() -> usize {
    DEFAULT_DEV_SIZE
}
fn default_splits() -> usize {
    DEFAULT_SPLITS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_dev_size")]
    pub total: usize,
    #[serde(default = "default_splits")]
    pub n_splits: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            total: DEFAULT_DEV_SIZE,
            n_splits: DEFAULT_SPLITS,
            base_seed: 0,
        }
    }
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

/// The `search` section: everything in [`SearchConfig`] except the operator settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            top_k: None,
            pool_size: DEFAULT_POOL_SIZE,
            scorer: None,
            seed: 0,
            parallelism: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub task: TaskSource,
    pub dataset: PathBuf,
    pub prompts: Vec<String>,
    #[serde(default)]
    pub split: SplitConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub search: SearchSection,
    pub mutation: MutationConfig,
}

impl RunConfig {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.search.iterations,
            top_k: self.search.top_k,
            pool_size: self.search.pool_size,
            scorer: self.search.scorer,
            mutation: self.mutation.clone(),
            seed: self.search.seed,
            parallelism: self.search.parallelism,
        }
    }
}

/// A configuration with its task, example pool and seed prompts loaded and checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub pool: Vec<Example>,
    pub seeds: Vec<Template>,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base)
    }

    /// Load the files `config` refers to, resolving relative paths against `base`.
    pub fn from_config(mut config: RunConfig, base: &Path) -> Result<Self, ConfigError> {
        if config.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: config.version });
        }
        let task = match &config.task {
            TaskSource::File(p) => {
                let resolved = resolve(base, p);
                let spec = TaskSpec::load(&resolved)?;
                config.task = TaskSource::File(resolved);
                spec
            }
            TaskSource::Inline(spec) => {
                spec.validate()?;
                spec.clone()
            }
        };
        config.dataset = resolve(base, &config.dataset);
        let pool = load_dataset(&config.dataset, &task)?;
        if config.prompts.is_empty() {
            return Err(ConfigError::Invalid("at least one seed prompt is required".into()));
        }
        let seeds = config
            .prompts
            .iter()
            .enumerate()
            .map(|(index, raw)| {
                let t = parse_template(raw).map_err(|source| ConfigError::Prompt { index, source })?;
                if validate_for_task(&t, &task) {
                    Ok(t)
                } else {
                    Err(ConfigError::PromptSchema(index))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if config.split.n_splits == 0 {
            return Err(ConfigError::Invalid("split.n_splits must be at least 1".into()));
        }
        config.backend.validate()?;
        config.search_config().resolve(seeds.len())?;
        Ok(Self {
            config,
            task,
            pool,
            seeds,
        })
    }

    pub fn splits(&self) -> Result<Vec<DataSplit>, ConfigError> {
        let s = &self.config.split;
        Ok(make_splits(
            &self.pool,
            self.task.num_classes,
            s.total,
            s.n_splits,
            s.base_seed,
        )?)
    }

    /// Average number of answer choices per example in the pool.
    pub fn mean_choices(&self) -> f64 {
        if self.pool.is_empty() {
            return self.task.num_classes as f64;
        }
        let total: usize = self.pool.iter().map(|ex| ex.effective_choices(&self.task).len()).sum();
        total as f64 / self.pool.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TASK: &str = r#"{"name":"toy","input_fields":{"x":"input"},"answer_choices":["a","b"],"num_classes":2,"required_placeholders":["x"]}"#;

    fn write_fixture(dir: &Path, prompts: &str) -> PathBuf {
        fs::write(dir.join("toy.task.json"), TASK).unwrap();
        let rows: String = (0..20)
            .map(|i| {
                format!(
                    "{{\"id\":\"r{i}\",\"values\":{{\"x\":\"item {i}\"}},\"gold\":{}}}\n",
                    i % 2
                )
            })
            .collect();
        fs::write(dir.join("toy.jsonl"), rows).unwrap();
        let cfg = format!(
            r#"{{"version":1,"task":"toy.task.json","dataset":"toy.jsonl","prompts":{prompts},
                "split":{{"total":8}},"backend":{{"kind":"mock"}},"search":{{"iterations":1}},
                "mutation":{{"operator":"cloze"}}}}"#
        );
        let path = dir.join("run.json");
        fs::write(&path, cfg).unwrap();
        path
    }

    #[test]
    fn loads_relative_paths_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), r#"["Answer {{x}}", "Say {{x}}"]"#);
        let exp = Experiment::load(&path).unwrap();
        assert_eq!(exp.pool.len(), 20);
        assert_eq!(exp.seeds.len(), 2);
        assert_eq!(exp.config.split.n_splits, 3);
        assert_eq!(exp.config.search.pool_size, 30);
        let splits = exp.splits().unwrap();
        assert_eq!(splits.len(), 3);
        assert!(splits.iter().all(|s| s.dev.len() == 8));
        assert_eq!(exp.mean_choices(), 2.0);
    }

    #[test]
    fn rejects_bad_prompts_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), r#"["Answer {{y}}"]"#);
        assert!(matches!(Experiment::load(&path), Err(ConfigError::PromptSchema(0))));
        let path = write_fixture(dir.path(), r#"["Answer {{x"]"#);
        assert!(matches!(
            Experiment::load(&path),
            Err(ConfigError::Prompt { index: 0, .. })
        ));
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Experiment::load(&path),
            Err(ConfigError::Version { found: 2 })
        ));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), r#"["Answer {{x}}"]"#);
        fs::remove_file(dir.path().join("toy.jsonl")).unwrap();
        assert!(matches!(
            Experiment::load(&path),
            Err(ConfigError::Data(DataError::Io { .. }))
        ));
    }
}
