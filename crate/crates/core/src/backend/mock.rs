//! Deterministic hash-driven backend.
//!
//! Every answer is a pure function of the request, built from FNV-1a
//! (see [`crate::hash`]). `∥` below is plain string concatenation and
//! integers are written in decimal.
//!
//! * score: `logprob(c) = -(h(prompt ∥ "§" ∥ c) mod 1000) / 100`
//! * generate: the payload after the last `Sentence 1:` (and before a
//!   following `Sentence 2:`) is paraphrased word by word: a word `w` with a
//!   synonym group `g` becomes `g[h(w ∥ seed) mod |g|]`.
//! * fill: candidate `k` fills blank `i` with
//!   `FILLER_WORDS[h(text ∥ i ∥ k) mod |FILLER_WORDS|]`, score `-k`.
//! * translate: `en -> L` shuffles the words with a SplitMix64 permutation
//!   seeded by `h(L ∥ word_count)` and prefixes `[L] `; `L -> en` undoes the
//!   shuffle and paraphrases with seed `h(L)`.

use crate::hash::{fnv1a, fnv1a_parts, SplitMix64};
use crate::template::contains_sentinel_chars;

use super::words::{synonyms, FILLER_WORDS};
use super::{
    check_fill, check_generate, check_score, check_translate, BackendError, FillCandidate, FillRequest, FillResponse,
    GenRequest, GenResponse, LanguageModel, ScoreRequest, ScoreResponse, TranslateRequest, TranslateResponse,
    GENERATION_PASSES, SOURCE_LANGUAGE,
};

const MARKER_LETTERS: &[u8; 26] = b"XYZABCDEFGHIJKLMNOPQRSTUVW";

/// Blank marker number `index`: `<X>`, `<Y>`, `<Z>`, `<A>`, ... and `<X26>`
/// onwards once the alphabet is used up.
pub fn blank_marker(index: usize) -> String {
    match MARKER_LETTERS.get(index) {
        Some(&letter) => format!("<{}>", letter as char),
        None => format!("<X{index}>"),
    }
}

/// Number of consecutive blank markers, starting from `<X>`, present in `text`.
pub fn count_blanks(text: &str) -> usize {
    (0..).take_while(|&i| text.contains(&blank_marker(i))).count()
}

pub fn mock_logprob(prompt: &str, choice: &str) -> f64 {
    let h = fnv1a_parts(&[prompt.as_bytes(), "§".as_bytes(), choice.as_bytes()]);
    -((h % 1000) as f64) / 100.0
}

fn substitute_word(core: &str, seed: u64) -> Option<String> {
    let lower = core.to_lowercase();
    let group = synonyms(&lower)?;
    let seed = seed.to_string();
    let pick = group[(fnv1a_parts(&[lower.as_bytes(), seed.as_bytes()]) % group.len() as u64) as usize];
    let capitalized = core.chars().next().is_some_and(char::is_uppercase);
    Some(if capitalized {
        let mut chars = pick.chars();
        chars
            .next()
            .map(|first| first.to_uppercase().chain(chars).collect())
            .unwrap_or_default()
    } else {
        pick.to_string()
    })
}

fn paraphrase_token(token: &str, seed: u64) -> String {
    if contains_sentinel_chars(token) {
        return token.to_string();
    }
    let start = token.find(char::is_alphanumeric);
    let end = token.rfind(char::is_alphanumeric);
    let (Some(start), Some(end)) = (start, end) else {
        return token.to_string();
    };
    let end = end + token[end..].chars().next().map_or(0, char::len_utf8);
    let core = &token[start..end];
    match substitute_word(core, seed) {
        Some(replacement) => format!("{}{}{}", &token[..start], replacement, &token[end..]),
        None => token.to_string(),
    }
}

/// Word-by-word synonym substitution that keeps whitespace, punctuation,
/// capitalization of the first letter, and sentinel tokens untouched.
pub fn paraphrase(text: &str, seed: u64) -> String {
    let mut out = String::with_capacity(text.len());
    let mut token_start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(start) = token_start.take() {
                out.push_str(&paraphrase_token(&text[start..i], seed));
            }
            out.push(ch);
        } else if token_start.is_none() {
            token_start = Some(i);
        }
    }
    if let Some(start) = token_start {
        out.push_str(&paraphrase_token(&text[start..], seed));
    }
    out
}

fn sentence_payload(prompt: &str) -> &str {
    let payload = prompt
        .rfind("Sentence 1:")
        .map_or(prompt, |i| &prompt[i + "Sentence 1:".len()..]);
    let payload = payload.rfind("Sentence 2:").map_or(payload, |i| &payload[..i]);
    let payload = payload.trim();
    payload.strip_suffix(',').unwrap_or(payload).trim_end()
}

fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let mut seen = 0;
    let mut in_token = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            seen += 1;
            if seen > max_tokens {
                return text[..i].trim_end();
            }
        }
    }
    text
}

fn cut_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    stop.iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .map_or(text, |i| &text[..i])
}

fn permutation(lang: &str, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let seed = fnv1a_parts(&[lang.as_bytes(), len.to_string().as_bytes()]);
    SplitMix64::new(seed).shuffle(&mut order);
    order
}

fn pivot_marker(lang: &str) -> String {
    format!("[{lang}] ")
}

#[derive(Debug, Clone)]
pub struct MockModel {
    parallelism: usize,
}

impl Default for MockModel {
    fn default() -> Self {
        Self::new(1)
    }
}

impl MockModel {
    pub fn new(parallelism: usize) -> Self {
        Self {
            parallelism: parallelism.max(1),
        }
    }
}

impl LanguageModel for MockModel {
    fn score_choices(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        check_score(req)?;
        Ok(ScoreResponse {
            logprobs: req.choices.iter().map(|c| mock_logprob(&req.prompt, c)).collect(),
            forward_passes: req.choices.len() as u64,
        })
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        check_generate(req)?;
        let paraphrased = paraphrase(sentence_payload(&req.prompt), req.seed);
        let stopped = cut_at_stop(&paraphrased, &req.stop);
        let text = truncate_tokens(stopped, req.max_tokens as usize);
        Ok(GenResponse {
            text: text.to_string(),
            forward_passes: GENERATION_PASSES,
        })
    }

    fn fill_blanks(&self, req: &FillRequest) -> Result<FillResponse, BackendError> {
        let blanks = check_fill(req)?;
        let text = req.text_with_blanks.as_bytes();
        let candidates = (0..req.n_candidates)
            .map(|k| {
                let k_str = k.to_string();
                let fills = (0..blanks)
                    .map(|i| {
                        let h = fnv1a_parts(&[text, i.to_string().as_bytes(), k_str.as_bytes()]);
                        FILLER_WORDS[(h % FILLER_WORDS.len() as u64) as usize].to_string()
                    })
                    .collect();
                FillCandidate {
                    fills,
                    score: 0.0 - f64::from(k),
                }
            })
            .collect();
        Ok(FillResponse {
            candidates,
            forward_passes: GENERATION_PASSES * u64::from(req.n_candidates),
        })
    }

    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        check_translate(req)?;
        let text = if req.src == SOURCE_LANGUAGE {
            let words: Vec<&str> = req.text.split_whitespace().collect();
            let shuffled: Vec<&str> = permutation(&req.tgt, words.len()).iter().map(|&i| words[i]).collect();
            format!("{}{}", pivot_marker(&req.tgt), shuffled.join(" "))
        } else if req.tgt == SOURCE_LANGUAGE {
            let body = req.text.strip_prefix(&pivot_marker(&req.src)).ok_or_else(|| {
                BackendError::InvalidRequest(format!("text was not produced by the `{}` pivot", req.src))
            })?;
            let shuffled: Vec<&str> = body.split_whitespace().collect();
            let mut words = vec![""; shuffled.len()];
            for (slot, &source) in permutation(&req.src, shuffled.len()).iter().enumerate() {
                words[source] = shuffled[slot];
            }
            paraphrase(&words.join(" "), fnv1a(&req.src))
        } else {
            return Err(BackendError::UnsupportedLanguage {
                src: req.src.clone(),
                tgt: req.tgt.clone(),
            });
        };
        Ok(TranslateResponse {
            text,
            forward_passes: GENERATION_PASSES,
        })
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }
}
