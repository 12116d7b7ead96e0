//! The generational search loop, final rerank and checkpoints.
//!
//! Generation `t` is scored, its top-K (the reproductive group) is stored in
//! the archive, and unless `t == T` the next pool is bred from that group.
//! After the last generation every archive member is rescored on the same
//! dev split and the best K are returned.
//!
//! Candidates are ranked by metric (descending), then by earlier generation,
//! then by normalized text, which makes every selection a total order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::OnceLock;
use std::thread;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel};
use crate::hash::{fnv1a_parts, SplitMix64};
use crate::mutation::{filter_candidates, mutate, Candidate, Mutation, MutationConfig, MutationError, Operator};
use crate::scoring::{evaluate_pool, Metric, PromptScore, ScorerKind};
use crate::task::{DataSplit, TaskSpec};
use crate::template::{validate_for_task, Template};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_ITERATIONS: usize = 6;
pub const DEFAULT_POOL_SIZE: usize = 30;
/// Consecutive fruitless attempts after which a parent is exhausted.
pub const STALL_LIMIT: u32 = 3;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("seed prompt {0} is not valid for the task")]
    InvalidSeedPrompt(usize),
    #[error("at least one seed prompt is required")]
    NoSeedPrompts,
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("backend failure: {0}")]
    BackendFatal(#[source] BackendError),
    #[error("generation {0} has no successfully scored prompt to breed from")]
    NoViableParents(usize),
    #[error("operation not allowed in phase {0:?}")]
    WrongPhase(Phase),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of breeding rounds `T`; `T + 1` generations are scored.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Size of the reproductive group; unset means the number of seed prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Unset means accuracy for back translation and continuation, average
    /// gold logprob for cloze.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerKind>,
    pub mutation: MutationConfig,
    #[serde(default)]
    pub seed: u64,
    /// Concurrent scoring and mutation calls; unset means the backend's own limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

impl SearchConfig {
    pub fn new(operator: Operator) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            top_k: None,
            pool_size: DEFAULT_POOL_SIZE,
            scorer: None,
            mutation: MutationConfig::new(operator),
            seed: 0,
            parallelism: None,
        }
    }

    pub fn scorer(&self) -> ScorerKind {
        self.scorer.unwrap_or(self.mutation.operator.default_scorer())
    }

    /// `K`, falling back to the number of seeds when unset.
    pub fn k(&self, n_seeds: usize) -> usize {
        self.top_k.unwrap_or(n_seeds)
    }

    /// Fill in every defaulted field and check feasibility.
    pub fn resolve(&self, n_seeds: usize) -> Result<SearchConfig, SearchError> {
        let invalid = |msg: String| Err(SearchError::InvalidConfig(msg));
        let k = self.k(n_seeds);
        if self.pool_size == 0 {
            return invalid("pool_size must be at least 1".into());
        }
        if k == 0 || k > self.pool_size {
            return invalid(format!("top_k {k} must lie in 1..={}", self.pool_size));
        }
        if self.parallelism == Some(0) {
            return invalid("parallelism must be at least 1".into());
        }
        self.mutation.validate().map_err(SearchError::InvalidConfig)?;
        let mut resolved = self.clone();
        resolved.top_k = Some(k);
        resolved.scorer = Some(self.scorer());
        let children = self.mutation.children_per_parent.unwrap_or(self.pool_size.div_ceil(k));
        if self.mutation.operator == Operator::SentenceContinuation && children * k < self.pool_size {
            return invalid(format!(
                "children_per_parent {children} x top_k {k} cannot fill a pool of {}",
                self.pool_size
            ));
        }
        resolved.mutation.children_per_parent = Some(children);
        Ok(resolved)
    }
}

/// A candidate with the score it received and the generation it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrompt {
    pub candidate: Candidate,
    pub generation: usize,
    pub score: PromptScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub t: usize,
    pub members: Vec<RankedPrompt>,
    /// Prompt ids of the reproductive group, best first.
    pub top_k: Vec<String>,
}

impl Generation {
    /// Best and mean metric over successfully scored members.
    pub fn summary(&self) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .members
            .iter()
            .filter(|m| !m.score.metric.is_failed())
            .map(|m| m.score.metric.value())
            .collect();
        if values.is_empty() {
            return None;
        }
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((best, values.iter().sum::<f64>() / values.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Iterating { t: usize },
    Reranking,
    Done,
}

/// Everything needed to continue a search; checkpoints serialize it whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub version: u32,
    pub config: SearchConfig,
    pub task: TaskSpec,
    pub dev: DataSplit,
    pub seeds: Vec<Template>,
    pub generations: Vec<Generation>,
    /// Union of all stored reproductive groups, first occurrence of each
    /// normalized text only, with the scores they had when stored.
    pub archive: Vec<RankedPrompt>,
    /// The generation waiting to be scored.
    pub pool: Vec<Candidate>,
    pub rng: SplitMix64,
    pub phase: Phase,
    /// Normalized texts of every prompt that has entered a generation.
    pub seen: BTreeSet<String>,
    pub forward_passes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Vec<RankedPrompt>>,
}

/// Compact record of a scored prompt for the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub prompt_id: String,
    pub text: String,
    pub operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub generation: usize,
    pub metric: Metric,
}

impl From<&RankedPrompt> for PromptSummary {
    fn from(r: &RankedPrompt) -> Self {
        Self {
            prompt_id: r.candidate.id(),
            text: r.candidate.template.raw().to_string(),
            operator: r.candidate.operator.clone(),
            parent_id: r.candidate.parent_id.clone(),
            generation: r.generation,
            metric: r.score.metric.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    GenerationScored {
        t: usize,
        members: Vec<PromptSummary>,
        top_k: Vec<String>,
        forward_passes: u64,
    },
    PoolBred {
        t: usize,
        size: usize,
        children: usize,
        padded_parents: usize,
        padded_duplicates: usize,
        attempts: usize,
        dropped: usize,
        forward_passes: u64,
    },
    Reranked {
        results: Vec<PromptSummary>,
        forward_passes: u64,
    },
}

fn rank_order(a: &RankedPrompt, b: &RankedPrompt) -> Ordering {
    b.score
        .metric
        .compare(&a.score.metric)
        .then(a.generation.cmp(&b.generation))
        .then_with(|| a.candidate.normalized().cmp(&b.candidate.normalized()))
}

/// The best `k` distinct (by normalized text) successfully scored entries.
pub fn select_top_k(mut entries: Vec<RankedPrompt>, k: usize) -> Vec<RankedPrompt> {
    entries.retain(|e| !e.score.metric.is_failed());
    entries.sort_by(rank_order);
    let mut taken = HashSet::new();
    entries
        .into_iter()
        .filter(|e| taken.insert(e.candidate.normalized()))
        .take(k)
        .collect()
}

impl SearchState {
    pub fn new(cfg: &SearchConfig, task: TaskSpec, dev: DataSplit, seeds: Vec<Template>) -> Result<Self, SearchError> {
        if seeds.is_empty() {
            return Err(SearchError::NoSeedPrompts);
        }
        if let Some(index) = seeds.iter().position(|t| !validate_for_task(t, &task)) {
            return Err(SearchError::InvalidSeedPrompt(index));
        }
        let config = cfg.resolve(seeds.len())?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            rng: SplitMix64::new(config.seed),
            config,
            task,
            dev,
            pool: seeds.iter().cloned().map(Candidate::seed).collect(),
            seeds,
            generations: Vec::new(),
            archive: Vec::new(),
            phase: Phase::Iterating { t: 0 },
            seen: BTreeSet::new(),
            forward_passes: 0,
            result: None,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k(self.seeds.len())
    }

    fn parallelism(&self, backend: &dyn LanguageModel) -> usize {
        self.config.parallelism.unwrap_or_else(|| backend.parallelism()).max(1)
    }

    fn score(&self, candidates: &[Candidate], backend: &dyn LanguageModel) -> Result<Vec<PromptScore>, SearchError> {
        let templates: Vec<Template> = candidates.iter().map(|c| c.template.clone()).collect();
        evaluate_pool(
            &templates,
            &self.task,
            &self.dev,
            backend,
            self.config.scorer(),
            self.parallelism(backend),
        )
        .map_err(|e| {
            warn!("scoring aborted after {} complete prompts", e.partial.len());
            SearchError::BackendFatal(e.source)
        })
    }
}

/// Map `f` over `items` with up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send + Sync>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let slots: Vec<OnceLock<R>> = items.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, AtomicOrdering::Relaxed);
                let Some(item) = items.get(index) else { break };
                let _ = slots[index].set(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("every slot is filled once the scope ends"))
        .collect()
}

struct Bred {
    pool: Vec<Candidate>,
    children: usize,
    padded_parents: usize,
    padded_duplicates: usize,
    attempts: usize,
    dropped: usize,
    forward_passes: u64,
}

fn attempt_seed(generation_seed: u64, parent: usize, attempt: u32) -> u64 {
    fnv1a_parts(&[
        generation_seed.to_string().as_bytes(),
        b":",
        parent.to_string().as_bytes(),
        b":",
        attempt.to_string().as_bytes(),
    ])
}

/// Breed the next pool from `parents` (best first). Parents take turns
/// contributing one child each; a parent whose queue runs dry is asked for
/// another batch, and a parent that yields nothing new `STALL_LIMIT` times in
/// a row is exhausted. If every parent is exhausted before the pool is full,
/// the parents themselves fill the remaining slots, repeated if necessary.
fn breed(
    parents: &[RankedPrompt],
    state: &SearchState,
    seen: &BTreeSet<String>,
    generation_seed: u64,
    backend: &dyn LanguageModel,
) -> Bred {
    let cfg = &state.config;
    let n = parents.len();
    let workers = state.parallelism(backend);
    let mut queues: Vec<VecDeque<Candidate>> = vec![VecDeque::new(); n];
    let mut attempts = vec![0u32; n];
    let mut stalls = vec![0u32; n];
    let mut exhausted = vec![false; n];
    let mut claimed: HashSet<String> = seen.iter().cloned().collect();
    let mut out = Bred {
        pool: Vec::with_capacity(cfg.pool_size),
        children: 0,
        padded_parents: 0,
        padded_duplicates: 0,
        attempts: 0,
        dropped: 0,
        forward_passes: 0,
    };

    while out.pool.len() < cfg.pool_size {
        let jobs: Vec<(usize, MutationConfig)> = (0..n)
            .filter(|&i| !exhausted[i] && queues[i].is_empty())
            .map(|i| {
                let mut mcfg = cfg.mutation.clone();
                mcfg.seed = attempt_seed(generation_seed, i, attempts[i]);
                attempts[i] += 1;
                (i, mcfg)
            })
            .collect();
        out.attempts += jobs.len();
        let results: Vec<Result<Mutation, MutationError>> = parallel_map(&jobs, workers, |(i, mcfg)| {
            mutate(&parents[*i].candidate.template, backend, mcfg)
        });

        for ((i, _), result) in jobs.iter().zip(results) {
            let i = *i;
            let fresh = match result {
                Ok(m) => {
                    out.forward_passes += m.forward_passes;
                    out.dropped += m.dropped.len();
                    let offered = m.candidates.len();
                    let kept = filter_candidates(m.candidates, &claimed, &state.task);
                    out.dropped += offered - kept.len();
                    kept
                }
                Err(e) => {
                    out.forward_passes += e.forward_passes();
                    debug!("parent {i} attempt failed: {e}");
                    if matches!(e, MutationError::NoMaskableTokens | MutationError::InvalidParent(_)) {
                        exhausted[i] = true;
                    }
                    Vec::new()
                }
            };
            if fresh.is_empty() {
                stalls[i] += 1;
                if stalls[i] >= STALL_LIMIT {
                    exhausted[i] = true;
                }
            } else {
                stalls[i] = 0;
                claimed.extend(fresh.iter().map(Candidate::normalized));
                queues[i].extend(fresh);
            }
        }

        let mut progressed = false;
        for queue in queues.iter_mut() {
            if out.pool.len() >= cfg.pool_size {
                break;
            }
            if let Some(child) = queue.pop_front() {
                out.pool.push(child);
                progressed = true;
            }
        }
        if !progressed && exhausted.iter().all(|&e| e) {
            break;
        }
    }
    out.children = out.pool.len();

    let pad = |parent: &RankedPrompt, kind: &str| {
        let mut c = parent.candidate.clone();
        c.parent_id = Some(parent.candidate.id());
        c.operator = "keep_parent".into();
        c.provenance = BTreeMap::from([("padding".to_string(), kind.to_string())]);
        c
    };
    let in_pool: HashSet<String> = out.pool.iter().map(Candidate::normalized).collect();
    for parent in parents {
        if out.pool.len() >= cfg.pool_size {
            break;
        }
        if !in_pool.contains(&parent.candidate.normalized()) {
            out.pool.push(pad(parent, "parent"));
            out.padded_parents += 1;
        }
    }
    while out.pool.len() < cfg.pool_size && !parents.is_empty() {
        let parent = &parents[out.padded_duplicates % parents.len()];
        out.pool.push(pad(parent, "duplicate"));
        out.padded_duplicates += 1;
    }
    out
}

/// Score the pending generation, store its top-K and, unless it is the last
/// one, breed the next pool. The state is only modified once every backend
/// call of the step has succeeded.
pub fn step(state: &mut SearchState, backend: &dyn LanguageModel) -> Result<Vec<Event>, SearchError> {
    let Phase::Iterating { t } = state.phase else {
        return Err(SearchError::WrongPhase(state.phase));
    };
    let scores = state.score(&state.pool, backend)?;
    let mut forward_passes: u64 = scores.iter().map(|s| s.forward_passes).sum();
    let members: Vec<RankedPrompt> = state
        .pool
        .iter()
        .cloned()
        .zip(scores)
        .map(|(candidate, score)| RankedPrompt {
            candidate,
            generation: t,
            score,
        })
        .collect();
    let top = select_top_k(members.clone(), state.k());
    let top_k: Vec<String> = top.iter().map(|r| r.candidate.id()).collect();
    let mut events = vec![Event::GenerationScored {
        t,
        members: members.iter().map(PromptSummary::from).collect(),
        top_k: top_k.clone(),
        forward_passes,
    }];

    let mut archive = state.archive.clone();
    let mut archived: HashSet<String> = archive.iter().map(|r| r.candidate.normalized()).collect();
    archive.extend(
        top.iter()
            .filter(|r| archived.insert(r.candidate.normalized()))
            .cloned(),
    );
    let mut seen = state.seen.clone();
    seen.extend(members.iter().map(|m| m.candidate.normalized()));
    let mut rng = state.rng;

    let (pool, phase) = if t < state.config.iterations {
        if top.is_empty() {
            return Err(SearchError::NoViableParents(t));
        }
        let bred = breed(&top, state, &seen, rng.next_u64(), backend);
        forward_passes += bred.forward_passes;
        info!(
            "generation {}: {} children, {} padded parents, {} padded duplicates",
            t + 1,
            bred.children,
            bred.padded_parents,
            bred.padded_duplicates
        );
        events.push(Event::PoolBred {
            t: t + 1,
            size: bred.pool.len(),
            children: bred.children,
            padded_parents: bred.padded_parents,
            padded_duplicates: bred.padded_duplicates,
            attempts: bred.attempts,
            dropped: bred.dropped,
            forward_passes: bred.forward_passes,
        });
        (bred.pool, Phase::Iterating { t: t + 1 })
    } else {
        (Vec::new(), Phase::Reranking)
    };

    state.generations.push(Generation { t, members, top_k });
    state.archive = archive;
    state.seen = seen;
    state.rng = rng;
    state.pool = pool;
    state.phase = phase;
    state.forward_passes += forward_passes;
    Ok(events)
}

/// Rescore every archive member and keep the best K.
pub fn final_rerank(state: &mut SearchState, backend: &dyn LanguageModel) -> Result<Vec<Event>, SearchError> {
    if state.phase != Phase::Reranking {
        return Err(SearchError::WrongPhase(state.phase));
    }
    let candidates: Vec<Candidate> = state.archive.iter().map(|r| r.candidate.clone()).collect();
    let scores = state.score(&candidates, backend)?;
    let forward_passes: u64 = scores.iter().map(|s| s.forward_passes).sum();
    let rescored = state
        .archive
        .iter()
        .zip(scores)
        .map(|(r, score)| RankedPrompt {
            candidate: r.candidate.clone(),
            generation: r.generation,
            score,
        })
        .collect();
    let result = select_top_k(rescored, state.k());
    let event = Event::Reranked {
        results: result.iter().map(PromptSummary::from).collect(),
        forward_passes,
    };
    state.forward_passes += forward_passes;
    state.result = Some(result);
    state.phase = Phase::Done;
    Ok(vec![event])
}

/// Run the state to completion, calling `observe` after every step and after
/// the rerank with the state as it stands and the events just produced.
pub fn drive(
    state: &mut SearchState,
    backend: &dyn LanguageModel,
    mut observe: impl FnMut(&SearchState, &[Event]) -> Result<(), SearchError>,
) -> Result<Vec<RankedPrompt>, SearchError> {
    loop {
        let events = match state.phase {
            Phase::Iterating { .. } => step(state, backend)?,
            Phase::Reranking => final_rerank(state, backend)?,
            Phase::Done => return Ok(state.result.clone().unwrap_or_default()),
        };
        observe(state, &events)?;
    }
}

/// Full search from seed prompts to the final top-K.
pub fn run_gps(
    cfg: &SearchConfig,
    task: &TaskSpec,
    dev: &DataSplit,
    seeds: &[Template],
    backend: &dyn LanguageModel,
) -> Result<Vec<RankedPrompt>, SearchError> {
    let mut state = SearchState::new(cfg, task.clone(), dev.clone(), seeds.to_vec())?;
    drive(&mut state, backend, |_, _| Ok(()))
}

/// Write the state as a single JSON document, atomically.
pub fn save_checkpoint(state: &SearchState, path: &Path) -> Result<(), SearchError> {
    let bytes = serde_json::to_vec(state).map_err(|e| SearchError::CorruptCheckpoint(e.to_string()))?;
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SearchState, SearchError> {
    let bytes = fs::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| SearchError::CorruptCheckpoint(e.to_string()))?;
    let found = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SearchError::CorruptCheckpoint("missing version".into()))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(SearchError::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| SearchError::CorruptCheckpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockModel, OracleModel};
    use crate::task::Example;
    use crate::template::parse_template;

    fn task() -> TaskSpec {
        TaskSpec {
            name: "toy".into(),
            input_fields: BTreeMap::from([("premise".to_string(), String::new())]),
            control_fields: BTreeSet::new(),
            answer_choices: Some(vec!["yes".into(), "no".into()]),
            choice_field: None,
            num_classes: 2,
            required_placeholders: BTreeSet::from(["premise".to_string()]),
        }
    }

    fn dev(n: usize) -> DataSplit {
        DataSplit {
            dev: (0..n)
                .map(|i| Example {
                    id: format!("e{i}"),
                    values: BTreeMap::from([("premise".to_string(), format!("case {i}"))]),
                    gold: i % 2,
                    choices: None,
                })
                .collect(),
            seed: 0,
            size: n,
        }
    }

    fn seeds() -> Vec<Template> {
        [
            "Select the most plausible answer for {{premise}}",
            "Given {{premise}} choose the correct reply",
            "Read the passage {{premise}} and say yes or no",
            "Is it true that {{premise}}",
            "{{premise}} Pick the best response",
        ]
        .iter()
        .map(|s| parse_template(s).unwrap())
        .collect()
    }

    fn entry(text: &str, generation: usize, correct: u64) -> RankedPrompt {
        let template = parse_template(text).unwrap();
        RankedPrompt {
            score: PromptScore {
                prompt_id: template.id(),
                metric: Metric::accuracy(correct, 10),
                per_example: Vec::new(),
                forward_passes: 0,
            },
            candidate: Candidate::seed(template),
            generation,
        }
    }

    #[test]
    fn config_resolution() {
        let cfg = SearchConfig::new(Operator::SentenceContinuation);
        let r = cfg.resolve(5).unwrap();
        assert_eq!(r.top_k, Some(5));
        assert_eq!(r.mutation.children_per_parent, Some(6));
        assert_eq!(r.scorer, Some(ScorerKind::Accuracy));
        let mut tight = cfg.clone();
        tight.mutation.children_per_parent = Some(5);
        assert!(tight.resolve(5).is_err());
        let mut big_k = cfg.clone();
        big_k.top_k = Some(31);
        assert!(big_k.resolve(5).is_err());
        assert_eq!(
            SearchConfig::new(Operator::Cloze).resolve(3).unwrap().scorer,
            Some(ScorerKind::AvgLogits)
        );
    }

    #[test]
    fn top_k_order_and_ties() {
        let entries = vec![
            entry("b {{premise}}", 1, 7),
            entry("a {{premise}}", 1, 7),
            entry("c {{premise}}", 0, 7),
            entry("d {{premise}}", 0, 9),
            entry("a  {{premise}}", 2, 7),
        ];
        let top = select_top_k(entries, 4);
        let texts: Vec<&str> = top.iter().map(|r| r.candidate.template.raw()).collect();
        assert_eq!(
            texts,
            ["d {{premise}}", "c {{premise}}", "a {{premise}}", "b {{premise}}"]
        );
    }

    #[test]
    fn failed_scores_are_never_selected() {
        let mut failed = entry("x {{premise}}", 0, 0);
        failed.score.metric = Metric::Failed { reason: "r".into() };
        let top = select_top_k(vec![failed, entry("y {{premise}}", 0, 0)], 2);
        assert_eq!(top.len(), 1);
    }

    #[test]
    fn zero_iterations_reranks_seeds() {
        let mut cfg = SearchConfig::new(Operator::SentenceContinuation);
        cfg.iterations = 0;
        cfg.top_k = Some(3);
        let mut state = SearchState::new(&cfg, task(), dev(8), seeds()).unwrap();
        let result = drive(&mut state, &MockModel::default(), |_, _| Ok(())).unwrap();
        assert_eq!(state.generations.len(), 1);
        assert_eq!(state.archive.len(), 3);
        assert_eq!(result.len(), 3);
        let cached: Vec<&Metric> = state.archive.iter().map(|r| &r.score.metric).collect();
        let fresh: Vec<&Metric> = result.iter().map(|r| &r.score.metric).collect();
        assert_eq!(cached, fresh);
        assert_eq!(state.forward_passes, (5 + 3) * 8 * 2);
    }

    #[test]
    fn pools_have_exact_size_and_no_unflagged_duplicates() {
        let mut cfg = SearchConfig::new(Operator::SentenceContinuation);
        cfg.iterations = 3;
        let mut state = SearchState::new(&cfg, task(), dev(8), seeds()).unwrap();
        let result = drive(&mut state, &MockModel::default(), |_, _| Ok(())).unwrap();
        assert_eq!(result.len(), 5);
        for g in &state.generations[1..] {
            assert_eq!(g.members.len(), 30);
            let mut texts = HashSet::new();
            for m in &g.members {
                if !texts.insert(m.candidate.normalized()) {
                    assert_eq!(m.candidate.provenance["padding"], "duplicate");
                }
            }
        }
    }

    #[test]
    fn back_translation_round_robin_schedule() {
        let mut cfg = SearchConfig::new(Operator::BackTranslation);
        cfg.iterations = 1;
        let mut state = SearchState::new(&cfg, task(), dev(4), seeds()).unwrap();
        let backend = MockModel::default();
        step(&mut state, &backend).unwrap();
        assert_eq!(state.pool.len(), 30);

        // Mock translation ignores the seed, so each parent's first batch is all
        // it will ever offer. Enumerate the schedule from those batches.
        let parents = &state.generations[0].top_k;
        let mut claimed: HashSet<String> = state.seen.iter().cloned().collect();
        let mut queues: Vec<VecDeque<String>> = Vec::new();
        for id in parents {
            let parent = seeds().into_iter().find(|s| &s.id() == id).unwrap();
            let batch = crate::mutation::mutate_back_translation(&parent, &backend, &cfg.mutation).unwrap();
            let kept = filter_candidates(batch.candidates, &claimed, &task());
            claimed.extend(kept.iter().map(Candidate::normalized));
            queues.push(kept.iter().map(|c| c.template.raw().to_string()).collect());
        }
        assert!(queues.iter().map(VecDeque::len).sum::<usize>() <= 55);
        let mut expected = Vec::new();
        while expected.len() < 30 && queues.iter().any(|q| !q.is_empty()) {
            for q in &mut queues {
                if expected.len() < 30 {
                    expected.extend(q.pop_front());
                }
            }
        }
        let children: Vec<String> = state
            .pool
            .iter()
            .filter(|c| c.operator == "back_translation")
            .map(|c| c.template.raw().to_string())
            .collect();
        assert_eq!(children, expected);
    }

    /// Returns its input unchanged, so every child duplicates its parent.
    struct Echo;

    impl LanguageModel for Echo {
        fn score_choices(
            &self,
            req: &crate::backend::ScoreRequest,
        ) -> Result<crate::backend::ScoreResponse, BackendError> {
            MockModel::default().score_choices(req)
        }
        fn generate(&self, req: &crate::backend::GenRequest) -> Result<crate::backend::GenResponse, BackendError> {
            let payload = req.prompt.rsplit("Sentence 1:").next().unwrap();
            let payload = payload
                .split("Sentence 2:")
                .next()
                .unwrap()
                .trim()
                .trim_end_matches(',');
            Ok(crate::backend::GenResponse {
                text: payload.to_string(),
                forward_passes: 2,
            })
        }
        fn fill_blanks(&self, _: &crate::backend::FillRequest) -> Result<crate::backend::FillResponse, BackendError> {
            unimplemented!()
        }
        fn translate(
            &self,
            _: &crate::backend::TranslateRequest,
        ) -> Result<crate::backend::TranslateResponse, BackendError> {
            unimplemented!()
        }
    }

    #[test]
    fn stall_falls_back_to_parents() {
        let mut cfg = SearchConfig::new(Operator::SentenceContinuation);
        cfg.iterations = 1;
        cfg.pool_size = 12;
        let mut state = SearchState::new(&cfg, task(), dev(4), seeds()).unwrap();
        let events = step(&mut state, &Echo).unwrap();
        let parents: BTreeSet<String> = state.generations[0].top_k.iter().cloned().collect();
        let pool: BTreeSet<String> = state.pool.iter().map(Candidate::id).collect();
        assert_eq!(pool, parents);
        assert_eq!(state.pool.len(), 12);
        assert!(matches!(
            events[1],
            Event::PoolBred {
                children: 0,
                padded_parents: 5,
                padded_duplicates: 7,
                attempts: 15,
                ..
            }
        ));
    }

    #[test]
    fn oracle_run_never_loses_to_best_seed() {
        let target = "Select the most believable reply for {{premise}}";
        let oracle = OracleModel::new(target, 1).unwrap();
        let cfg = SearchConfig::new(Operator::SentenceContinuation);
        let d = dev(16);
        let result = run_gps(&cfg, &task(), &d, &seeds(), &oracle).unwrap();
        let best_seed = seeds()
            .iter()
            .map(|s| crate::scoring::score_accuracy(s, &task(), &d, &oracle).unwrap().metric)
            .max_by(|a, b| a.compare(b))
            .unwrap();
        assert_ne!(result[0].score.metric.compare(&best_seed), Ordering::Less);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut cfg = SearchConfig::new(Operator::Cloze);
        cfg.iterations = 2;
        let mut state = SearchState::new(&cfg, task(), dev(6), seeds()).unwrap();
        step(&mut state, &MockModel::default()).unwrap();
        save_checkpoint(&state, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        fs::write(&path, &first[..first.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SearchError::CorruptCheckpoint(_))));
        let mut value: serde_json::Value = serde_json::from_slice(&first).unwrap();
        value["version"] = 99.into();
        fs::write(&path, value.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(SearchError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = SearchConfig::new(Operator::Cloze);
        cfg.iterations = 3;
        let backend = MockModel::default();
        let mut full = SearchState::new(&cfg, task(), dev(6), seeds()).unwrap();
        let expected = drive(&mut full, &backend, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut partial = SearchState::new(&cfg, task(), dev(6), seeds()).unwrap();
        step(&mut partial, &backend).unwrap();
        step(&mut partial, &backend).unwrap();
        save_checkpoint(&partial, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        let result = drive(&mut resumed, &backend, |_, _| Ok(())).unwrap();
        assert_eq!(result, expected);
        assert_eq!(resumed, full);
    }

    #[test]
    fn invalid_seed_is_reported() {
        let mut s = seeds();
        s.push(parse_template("no slot here").unwrap());
        let err = SearchState::new(&SearchConfig::new(Operator::Cloze), task(), dev(4), s).unwrap_err();
        assert!(matches!(err, SearchError::InvalidSeedPrompt(5)));
    }
}
