//! Answer comparison for open-ended and multiple-choice questions.

use serde::{Deserialize, Serialize};

/// Lowercases, collapses whitespace and drops trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim()
        .to_string()
}

/// Leading option letter of a multiple-choice answer: `"B"`, `"(b)"`,
/// `"B. a cat"` all give `'B'`.
pub fn option_letter(s: &str) -> Option<char> {
    let t = s.trim_start().trim_start_matches(['(', '[']);
    let mut chars = t.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if !c.is_ascii_uppercase() {
        return None;
    }
    match chars.next() {
        None => Some(c),
        Some('.' | ')' | ']' | ':' | ',' | ' ') => Some(c),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMatcher {
    #[default]
    Normalized,
    MultipleChoice,
}

impl AnswerMatcher {
    pub fn matches(self, predicted: &str, truth: &str) -> bool {
        match self {
            AnswerMatcher::Normalized => normalize_answer(predicted) == normalize_answer(truth),
            AnswerMatcher::MultipleChoice => match (option_letter(predicted), option_letter(truth)) {
                (Some(a), Some(b)) => a == b,
                _ => normalize_answer(predicted) == normalize_answer(truth),
            },
        }
    }
}
