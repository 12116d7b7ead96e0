//! Word tables used by the deterministic mock backend.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Groups of interchangeable words. Every word maps to its whole group,
/// itself included, so a substitution can also keep the original word.
pub const SYNONYM_GROUPS: &[&[&str]] = &[
    &["plausible", "believable", "likely", "agreeable"],
    &["select", "choose", "pick", "identify"],
    &["say", "state", "claim", "assert"],
    &["justified", "right", "warranted"],
    &["reason", "grounds", "basis"],
    &["question", "query"],
    &["answer", "response", "reply"],
    &["passage", "paragraph", "excerpt"],
    &["above", "preceding", "earlier"],
    &["describe", "explain"],
    &["continue", "proceed", "unfold"],
    &["happen", "occur"],
    &["situation", "scenario", "circumstance"],
    &["description", "account"],
    &["begins", "starts", "opens"],
    &["refer", "point"],
    &["think", "believe", "suppose"],
    &["true", "accurate", "valid"],
    &["given", "provided"],
    &["following", "subsequent"],
    &["sentence", "statement"],
    &["mean", "imply", "suggest"],
    &["same", "identical"],
    &["read", "review", "examine"],
    &["determine", "decide", "judge"],
    &["option", "choice", "alternative"],
    &["good", "fine", "great"],
    &["big", "large"],
    &["small", "little"],
    &["fast", "quick"],
    &["show", "display"],
    &["help", "assist", "aid"],
    &["use", "employ"],
    &["make", "create"],
    &["find", "locate"],
    &["start", "begin"],
    &["end", "finish"],
    &["ask", "inquire"],
    &["tell", "inform"],
    &["consider", "weigh"],
    &["context", "setting"],
    &["correct", "proper"],
    &["example", "instance"],
    &["information", "details"],
    &["clearly", "plainly"],
];

/// Words the mock fill model draws from.
pub const FILLER_WORDS: &[&str] = &[
    "the",
    "a",
    "most",
    "likely",
    "best",
    "following",
    "this",
    "that",
    "which",
    "true",
    "next",
    "correct",
    "what",
    "how",
    "is",
    "it",
    "we",
    "say",
    "then",
    "so",
];

fn index() -> &'static HashMap<&'static str, &'static [&'static str]> {
    static INDEX: OnceLock<HashMap<&'static str, &'static [&'static str]>> = OnceLock::new();
    INDEX.get_or_init(|| {
        SYNONYM_GROUPS
            .iter()
            .flat_map(|group| group.iter().map(move |word| (*word, *group)))
            .collect()
    })
}

/// The synonym group of a lowercase word, if it has one.
pub fn synonyms(word: &str) -> Option<&'static [&'static str]> {
    index().get(word).copied()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn groups_are_disjoint_and_lowercase() {
        let mut seen = HashSet::new();
        for group in SYNONYM_GROUPS {
            assert!(group.len() >= 2);
            for word in *group {
                assert!(seen.insert(*word), "{word} in two groups");
                assert_eq!(word.to_lowercase(), *word);
            }
        }
        assert!(seen.len() >= 50);
    }

    #[test]
    fn lookup() {
        assert_eq!(synonyms("likely").unwrap()[0], "plausible");
        assert!(synonyms("zebra").is_none());
    }
}
