//! Synthetic scoring landscape with a known optimum.
//!
//! The oracle answers a scoring call for candidate template `c` on example
//! `i` correctly iff
//!
//! ```text
//! (h(c ∥ i) mod 10^6) / 10^6 < clamp(sim(c, target), 0.05, 0.95)
//! ```
//!
//! where `sim` is one minus the normalized word-level Levenshtein distance
//! between the protected texts (sentinels count as single words). Expected
//! dev accuracy therefore rises with similarity to the hidden target, while
//! every individual answer stays a pure function of `(c, i)`.
//!
//! Generation, filling and translation are delegated to [`MockModel`], so
//! the target can be reached by the mock paraphrase operators.

use crate::hash::fnv1a_parts;
use crate::template::{parse_template, protect, Template};

use super::mock::MockModel;
use super::{
    check_score, BackendError, FillRequest, FillResponse, GenRequest, GenResponse, LanguageModel, ScoreRequest,
    ScoreResponse, TranslateRequest, TranslateResponse,
};

pub const THRESHOLD_FLOOR: f64 = 0.05;
pub const THRESHOLD_CEILING: f64 = 0.95;

/// Edit distance between two token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(x != y);
            cur[j + 1] = substitution.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn protected_words(t: &Template) -> Option<Vec<String>> {
    let (text, _) = protect(t).ok()?;
    Some(text.split_whitespace().map(str::to_string).collect())
}

#[derive(Debug, Clone)]
pub struct OracleModel {
    target: Template,
    target_words: Vec<String>,
    mock: MockModel,
}

impl OracleModel {
    pub fn new(hidden_target: &str, parallelism: usize) -> Result<Self, BackendError> {
        let target = parse_template(hidden_target)
            .map_err(|e| BackendError::Config(format!("hidden target does not parse: {e}")))?;
        let target_words = protected_words(&target)
            .ok_or_else(|| BackendError::Config("hidden target contains sentinel characters".into()))?;
        Ok(Self {
            target,
            target_words,
            mock: MockModel::new(parallelism),
        })
    }

    pub fn target(&self) -> &Template {
        &self.target
    }

    /// Word-level similarity in `[0, 1]` between a candidate and the target.
    /// Text that does not parse or protect scores 0.
    pub fn similarity(&self, candidate_raw: &str) -> f64 {
        let Some(words) = parse_template(candidate_raw).ok().as_ref().and_then(protected_words) else {
            return 0.0;
        };
        let longest = words.len().max(self.target_words.len());
        if longest == 0 {
            return 1.0;
        }
        1.0 - levenshtein(&words, &self.target_words) as f64 / longest as f64
    }

    pub fn threshold(&self, candidate_raw: &str) -> f64 {
        self.similarity(candidate_raw).clamp(THRESHOLD_FLOOR, THRESHOLD_CEILING)
    }

    /// Whether the oracle answers example `example_index` correctly under the candidate.
    pub fn oracle_score(&self, candidate_raw: &str, example_index: usize) -> bool {
        let h = fnv1a_parts(&[candidate_raw.as_bytes(), example_index.to_string().as_bytes()]);
        let draw = (h % 1_000_000) as f64 / 1_000_000.0;
        draw < self.threshold(candidate_raw)
    }
}

impl LanguageModel for OracleModel {
    fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        check_score(req)?;
        let ctx = req
            .context
            .as_ref()
            .ok_or_else(|| BackendError::InvalidRequest("oracle scoring needs the candidate template".into()))?;
        let n = req.choices.len();
        if ctx.gold >= n {
            return Err(BackendError::InvalidRequest("gold index outside the choices".into()));
        }
        let winner = if self.oracle_score(&ctx.template, ctx.example_index) {
            ctx.gold
        } else {
            (ctx.gold + 1) % n
        };
        let logprobs = (0..n).map(|i| if i == winner { 0.0 } else { -1.0 }).collect();
        Ok(ScoreResponse {
            logprobs,
            forward_passes: n as u64,
        })
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        self.mock.generate(req)
    }

    fn fill_blanks(&self, req: &FillRequest) -> Result<FillResponse, BackendError> {
        self.mock.fill_blanks(req)
    }

    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        self.mock.translate(req)
    }

    fn parallelism(&self) -> usize {
        self.mock.parallelism()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScoreContext;

    const TARGET: &str = "one two three four five six seven eight nine ten";

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(&["a", "b"], &["b"]), 1);
    }

    #[test]
    fn identical_candidate_has_ceiling_threshold() {
        let oracle = OracleModel::new(TARGET, 1).unwrap();
        assert_eq!(oracle.similarity(TARGET), 1.0);
        assert_eq!(oracle.threshold(TARGET), THRESHOLD_CEILING);
    }

    #[test]
    fn disjoint_candidate_clamps_to_floor() {
        let oracle = OracleModel::new(TARGET, 1).unwrap();
        let other = "a b c d e f g h i j k l m n o p q r s t u v w x y z";
        assert!(oracle.similarity(other) < 0.05);
        assert_eq!(oracle.threshold(other), THRESHOLD_FLOOR);
    }

    #[test]
    fn two_edits_from_ten_words() {
        let oracle = OracleModel::new(TARGET, 1).unwrap();
        let candidate = "one two THREE four five six SEVEN eight nine ten";
        assert!((oracle.similarity(candidate) - 0.8).abs() < 1e-12);
        let correct = (0..32).filter(|&i| oracle.oracle_score(candidate, i)).count();
        // Brute-force enumeration of the 32 hash draws, done independently.
        assert_eq!(correct, FROZEN_CORRECT_OF_32);
    }

    const FROZEN_CORRECT_OF_32: usize = 27;

    #[test]
    fn sentinels_compare_atomically() {
        let oracle = OracleModel::new("Read {{text}} and answer", 1).unwrap();
        assert_eq!(oracle.similarity("Read {{ text }} and answer"), 1.0);
        assert!((oracle.similarity("Read {{other}} and answer") - 1.0).abs() < 1e-12);
        assert!(oracle.similarity("Read and answer") < 1.0);
    }

    #[test]
    fn score_choices_follows_verdict() {
        let oracle = OracleModel::new(TARGET, 1).unwrap();
        for index in 0..16 {
            let req = ScoreRequest {
                prompt: "rendered".into(),
                choices: vec!["a".into(), "b".into(), "c".into()],
                context: Some(ScoreContext {
                    template: TARGET.into(),
                    example_index: index,
                    gold: 2,
                }),
            };
            let resp = oracle.score_choices(&req).unwrap();
            let best = if oracle.oracle_score(TARGET, index) { 2 } else { 0 };
            assert_eq!(resp.logprobs[best], 0.0);
            assert_eq!(resp.logprobs.iter().filter(|&&l| l == 0.0).count(), 1);
            assert_eq!(resp.forward_passes, 3);
        }
        let bare = ScoreRequest {
            prompt: "x".into(),
            choices: vec!["a".into()],
            context: None,
        };
        assert!(oracle.score_choices(&bare).is_err());
    }
}
