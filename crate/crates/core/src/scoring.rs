//! Prompt fitness on the dev split and the concurrent pool evaluator.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering as AtomicOrdering};
use std::sync::OnceLock;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel, ScoreContext, ScoreRequest};
use crate::task::{DataSplit, TaskSpec};
use crate::template::{render, validate_for_task, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Fraction of dev examples whose argmax choice is the gold one.
    Accuracy,
    /// Mean gold-choice log-likelihood over the dev split.
    AvgLogits,
}

/// Fitness of one prompt. Accuracy keeps the exact counts so comparisons
/// never depend on float rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    Accuracy { correct: u64, total: u64, value: f64 },
    AvgLogits { value: f64 },
    Failed { reason: String },
}

impl Metric {
    pub fn accuracy(correct: u64, total: u64) -> Self {
        let value = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Metric::Accuracy { correct, total, value }
    }

    /// Numeric value; failed scores map to negative infinity.
    pub fn value(&self) -> f64 {
        match self {
            Metric::Accuracy { value, .. } | Metric::AvgLogits { value } => *value,
            Metric::Failed { .. } => f64::NEG_INFINITY,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, Metric::Failed { .. })
    }

    /// Quality order: `Greater` means `self` is better. Failed scores rank
    /// below everything else and tie with each other.
    pub fn compare(&self, other: &Metric) -> Ordering {
        match (self, other) {
            (Metric::Failed { .. }, Metric::Failed { .. }) => Ordering::Equal,
            (Metric::Failed { .. }, _) => Ordering::Less,
            (_, Metric::Failed { .. }) => Ordering::Greater,
            (
                Metric::Accuracy {
                    correct: a, total: n, ..
                },
                Metric::Accuracy {
                    correct: b, total: m, ..
                },
            ) => (u128::from(*a) * u128::from(*m)).cmp(&(u128::from(*b) * u128::from(*n))),
            _ => self.value().total_cmp(&other.value()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub example_id: String,
    pub predicted: usize,
    pub gold_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt_id: String,
    pub metric: Metric,
    pub per_example: Vec<ExampleOutcome>,
    pub forward_passes: u64,
}

impl PromptScore {
    fn failed(t: &Template, reason: String) -> Self {
        Self {
            prompt_id: t.id(),
            metric: Metric::Failed { reason },
            per_example: Vec::new(),
            forward_passes: 0,
        }
    }
}

#[derive(Debug, Error)]
#[error("pool evaluation aborted: {source}")]
pub struct PoolError {
    #[source]
    pub source: BackendError,
    /// Scores of the prompts whose every example finished before the abort.
    pub partial: Vec<(usize, PromptScore)>,
}

/// Index of the largest logprob; ties go to the lowest index.
pub fn argmax(logprobs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &lp) in logprobs.iter().enumerate().skip(1) {
        if lp > logprobs[best] || logprobs[best].is_nan() && !lp.is_nan() {
            best = i;
        }
    }
    best
}

/// Logprobs and forward passes of one scoring call.
type CallResult = Result<(Vec<f64>, u64), BackendError>;

/// Everything needed to score a template on one example.
struct PreparedPrompt {
    requests: Vec<ScoreRequest>,
}

fn prepare(t: &Template, task: &TaskSpec, dev: &DataSplit) -> Result<PreparedPrompt, String> {
    if !validate_for_task(t, task) {
        return Err("template is not valid for the task".into());
    }
    let mut requests = Vec::with_capacity(dev.dev.len());
    for (index, ex) in dev.dev.iter().enumerate() {
        let prompt = render(t, &ex.values).map_err(|e| e.to_string())?;
        let choices = ex.effective_choices(task).to_vec();
        if prompt.is_empty() || choices.is_empty() {
            return Err(format!("example `{}` renders to an unscorable request", ex.id));
        }
        requests.push(ScoreRequest {
            prompt,
            choices,
            context: Some(ScoreContext {
                template: t.raw().to_string(),
                example_index: index,
                gold: ex.gold,
            }),
        });
    }
    Ok(PreparedPrompt { requests })
}

fn aggregate(t: &Template, dev: &DataSplit, kind: ScorerKind, results: Vec<(Vec<f64>, u64)>) -> PromptScore {
    let mut per_example = Vec::with_capacity(results.len());
    let mut forward_passes = 0;
    let mut correct = 0u64;
    let mut gold_sum = 0.0;
    for (ex, (logprobs, passes)) in dev.dev.iter().zip(results) {
        let predicted = argmax(&logprobs);
        let gold_logprob = logprobs[ex.gold];
        correct += u64::from(predicted == ex.gold);
        gold_sum += gold_logprob;
        forward_passes += passes;
        per_example.push(ExampleOutcome {
            example_id: ex.id.clone(),
            predicted,
            gold_logprob,
        });
    }
    let total = dev.dev.len() as u64;
    let metric = match kind {
        ScorerKind::Accuracy => Metric::accuracy(correct, total),
        ScorerKind::AvgLogits => Metric::AvgLogits {
            value: if total == 0 { 0.0 } else { gold_sum / total as f64 },
        },
    };
    PromptScore {
        prompt_id: t.id(),
        metric,
        per_example,
        forward_passes,
    }
}

pub fn score_prompt(
    t: &Template,
    task: &TaskSpec,
    dev: &DataSplit,
    backend: &dyn LanguageModel,
    kind: ScorerKind,
) -> Result<PromptScore, BackendError> {
    let prepared = match prepare(t, task, dev) {
        Ok(p) => p,
        Err(reason) => return Ok(PromptScore::failed(t, reason)),
    };
    let mut results = Vec::with_capacity(prepared.requests.len());
    for req in &prepared.requests {
        let resp = backend.score_choices(req)?;
        results.push((resp.logprobs, resp.forward_passes));
    }
    Ok(aggregate(t, dev, kind, results))
}

pub fn score_accuracy(
    t: &Template,
    task: &TaskSpec,
    dev: &DataSplit,
    backend: &dyn LanguageModel,
) -> Result<PromptScore, BackendError> {
    score_prompt(t, task, dev, backend, ScorerKind::Accuracy)
}

pub fn score_avg_logits(
    t: &Template,
    task: &TaskSpec,
    dev: &DataSplit,
    backend: &dyn LanguageModel,
) -> Result<PromptScore, BackendError> {
    score_prompt(t, task, dev, backend, ScorerKind::AvgLogits)
}

/// Score every template, fanning the per-(prompt, example) requests out over
/// `parallelism` worker threads. Output order and content do not depend on
/// the number of workers.
pub fn evaluate_pool(
    templates: &[Template],
    task: &TaskSpec,
    dev: &DataSplit,
    backend: &dyn LanguageModel,
    kind: ScorerKind,
    parallelism: usize,
) -> Result<Vec<PromptScore>, PoolError> {
    let prepared: Vec<Result<PreparedPrompt, String>> = templates.iter().map(|t| prepare(t, task, dev)).collect();
    let jobs: Vec<(usize, &ScoreRequest)> = prepared
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().ok().map(|p| (i, p)))
        .flat_map(|(i, p)| p.requests.iter().map(move |r| (i, r)))
        .collect();

    let slots: Vec<OnceLock<CallResult>> = jobs.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = parallelism.max(1).min(jobs.len().max(1));

    let work = || loop {
        if abort.load(AtomicOrdering::Relaxed) {
            break;
        }
        let index = next.fetch_add(1, AtomicOrdering::Relaxed);
        let Some((_, req)) = jobs.get(index) else {
            break;
        };
        let result = backend
            .score_choices(req)
            .map(|resp| (resp.logprobs, resp.forward_passes));
        if result.is_err() {
            abort.store(true, AtomicOrdering::Relaxed);
        }
        let _ = slots[index].set(result);
    };
    if workers == 1 {
        work();
    } else {
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(work);
            }
        });
    }

    let mut results: Vec<Option<CallResult>> = slots.into_iter().map(OnceLock::into_inner).collect();
    let mut first_error = None;
    for (index, result) in results.iter().enumerate() {
        if let Some(Err(e)) = result {
            first_error = Some((index, e.clone()));
            break;
        }
    }

    let mut scores = Vec::with_capacity(templates.len());
    let mut cursor = 0;
    for (i, (t, prep)) in templates.iter().zip(&prepared).enumerate() {
        let score = match prep {
            Err(reason) => Some(PromptScore::failed(t, reason.clone())),
            Ok(p) => {
                let span = cursor..cursor + p.requests.len();
                cursor = span.end;
                let collected: Option<Vec<_>> = results[span]
                    .iter_mut()
                    .map(|slot| slot.take().and_then(Result::ok))
                    .collect();
                collected.map(|r| aggregate(t, dev, kind, r))
            }
        };
        scores.push((i, score));
    }

    match first_error {
        None => Ok(scores.into_iter().filter_map(|(_, s)| s).collect()),
        Some((_, source)) => Err(PoolError {
            source,
            partial: scores.into_iter().filter_map(|(i, s)| s.map(|s| (i, s))).collect(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{
        FillRequest, FillResponse, GenRequest, GenResponse, MockModel, ScoreResponse, TranslateRequest,
        TranslateResponse,
    };
    use crate::task::Example;
    use crate::template::parse_template;
    use std::collections::{BTreeMap, BTreeSet};

    fn task(choices: &[&str]) -> TaskSpec {
        TaskSpec {
            name: "toy".into(),
            input_fields: BTreeMap::from([("x".to_string(), "input".to_string())]),
            control_fields: BTreeSet::new(),
            answer_choices: Some(choices.iter().map(|s| s.to_string()).collect()),
            choice_field: None,
            num_classes: choices.len(),
            required_placeholders: BTreeSet::from(["x".to_string()]),
        }
    }

    fn dev(golds: &[usize]) -> DataSplit {
        DataSplit {
            dev: golds
                .iter()
                .enumerate()
                .map(|(i, &g)| Example {
                    id: format!("e{i}"),
                    values: BTreeMap::from([("x".to_string(), format!("input {i}"))]),
                    gold: g,
                    choices: None,
                })
                .collect(),
            seed: 0,
            size: golds.len(),
        }
    }

    /// Returns a fixed logprob vector for every request.
    struct Constant(Vec<f64>);

    impl LanguageModel for Constant {
        fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
            Ok(ScoreResponse {
                logprobs: self.0[..req.choices.len()].to_vec(),
                forward_passes: req.choices.len() as u64,
            })
        }
        fn generate(&self, _: &GenRequest) -> Result<GenResponse, BackendError> {
            unimplemented!()
        }
        fn fill_blanks(&self, _: &FillRequest) -> Result<FillResponse, BackendError> {
            unimplemented!()
        }
        fn translate(&self, _: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
            unimplemented!()
        }
    }

    struct Failing;

    impl LanguageModel for Failing {
        fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
            if req.prompt.contains("input 2") {
                Err(BackendError::HttpStatus {
                    code: 400,
                    message: "boom".into(),
                })
            } else {
                MockModel::default().score_choices(req)
            }
        }
        fn generate(&self, _: &GenRequest) -> Result<GenResponse, BackendError> {
            unimplemented!()
        }
        fn fill_blanks(&self, _: &FillRequest) -> Result<FillResponse, BackendError> {
            unimplemented!()
        }
        fn translate(&self, _: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
            unimplemented!()
        }
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[-1.0, -1.0, -2.0]), 0);
        assert_eq!(argmax(&[-3.0, -1.0, -1.0]), 1);
        assert_eq!(argmax(&[f64::NAN, -1.0]), 1);
        let t = parse_template("{{x}}").unwrap();
        let s = score_accuracy(&t, &task(&["a", "b"]), &dev(&[0, 1, 0]), &Constant(vec![-1.0, -1.0])).unwrap();
        assert!(s.per_example.iter().all(|o| o.predicted == 0));
        assert_eq!(s.metric, Metric::accuracy(2, 3));
    }

    #[test]
    fn all_correct_is_one() {
        let t = parse_template("{{x}}").unwrap();
        let golds = vec![1; 32];
        let s = score_accuracy(&t, &task(&["a", "b"]), &dev(&golds), &Constant(vec![-2.0, -0.5])).unwrap();
        assert_eq!(s.metric.value(), 1.0);
        assert_eq!(s.per_example.len(), 32);
    }

    #[test]
    fn single_choice_task_is_degenerate() {
        let mut spec = task(&["only", "x"]);
        spec.answer_choices = None;
        spec.choice_field = Some("choices".into());
        spec.num_classes = 1;
        let mut split = dev(&[0, 0]);
        for ex in &mut split.dev {
            ex.choices = Some(vec!["only".into()]);
        }
        let t = parse_template("{{x}}").unwrap();
        let s = score_accuracy(&t, &spec, &split, &MockModel::default()).unwrap();
        assert_eq!(s.metric.value(), 1.0);
    }

    #[test]
    fn avg_logits_of_constant_and_single() {
        let t = parse_template("{{x}}").unwrap();
        let s = score_avg_logits(&t, &task(&["a", "b"]), &dev(&[0, 1, 1]), &Constant(vec![-0.25, -0.25])).unwrap();
        assert_eq!(s.metric.value(), -0.25);
        let one = dev(&[1]);
        let s = score_avg_logits(&t, &task(&["a", "b"]), &one, &MockModel::default()).unwrap();
        let expected = MockModel::default()
            .score_choices(&ScoreRequest {
                prompt: "input 0".into(),
                choices: vec!["a".into(), "b".into()],
                context: None,
            })
            .unwrap()
            .logprobs[1];
        assert_eq!(s.metric.value(), expected);
    }

    #[test]
    fn render_failure_is_scoring_failed() {
        let t = parse_template("{{x}} {{y}}").unwrap();
        let s = score_accuracy(&t, &task(&["a", "b"]), &dev(&[0]), &MockModel::default()).unwrap();
        assert!(s.metric.is_failed());
        assert_eq!(s.forward_passes, 0);
        assert_eq!(s.metric.compare(&Metric::accuracy(0, 1)), Ordering::Less);
    }

    #[test]
    fn metric_ordering() {
        assert_eq!(Metric::accuracy(1, 2).compare(&Metric::accuracy(2, 4)), Ordering::Equal);
        assert_eq!(
            Metric::accuracy(3, 4).compare(&Metric::accuracy(2, 4)),
            Ordering::Greater
        );
        assert_eq!(
            Metric::AvgLogits { value: -1.0 }.compare(&Metric::AvgLogits { value: -2.0 }),
            Ordering::Greater
        );
        let failed = Metric::Failed { reason: "x".into() };
        assert_eq!(failed.compare(&Metric::AvgLogits { value: -1e9 }), Ordering::Less);
    }

    #[test]
    fn pool_order_and_parallel_invariance() {
        let templates: Vec<Template> = (0..12)
            .map(|i| parse_template(&format!("Prompt {i}: {{{{x}}}}")).unwrap())
            .collect();
        let spec = task(&["a", "b", "c"]);
        let split = dev(&[0, 1, 2, 0, 1, 2, 0, 1]);
        let serial = evaluate_pool(
            &templates,
            &spec,
            &split,
            &MockModel::default(),
            ScorerKind::Accuracy,
            1,
        )
        .unwrap();
        let parallel = evaluate_pool(
            &templates,
            &spec,
            &split,
            &MockModel::default(),
            ScorerKind::Accuracy,
            8,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&serial).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
        for (t, s) in templates.iter().zip(&serial) {
            assert_eq!(s.prompt_id, t.id());
        }
        assert!(
            evaluate_pool(&[], &spec, &split, &MockModel::default(), ScorerKind::Accuracy, 4)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn pool_forward_pass_accounting() {
        let templates: Vec<Template> = (0..30)
            .map(|i| parse_template(&format!("P{i} {{{{x}}}}")).unwrap())
            .collect();
        let golds: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let scores = evaluate_pool(
            &templates,
            &task(&["a", "b"]),
            &dev(&golds),
            &MockModel::default(),
            ScorerKind::Accuracy,
            4,
        )
        .unwrap();
        let total: u64 = scores.iter().map(|s| s.forward_passes).sum();
        assert_eq!(total, 30 * 32 * 2);
    }

    #[test]
    fn pool_aborts_on_backend_error() {
        let templates = vec![parse_template("{{x}}").unwrap()];
        let err = evaluate_pool(
            &templates,
            &task(&["a", "b"]),
            &dev(&[0, 1, 0]),
            &Failing,
            ScorerKind::Accuracy,
            1,
        )
        .unwrap_err();
        assert!(matches!(err.source, BackendError::HttpStatus { code: 400, .. }));
        assert!(err.partial.is_empty());
    }
}
