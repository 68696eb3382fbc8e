//! Tokenization and string normalization shared across the engine.

use std::collections::HashMap;

/// Token counting contract used for chunk sizes and token accounting.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Splits on Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Entity identity key: lowercase, whitespace collapsed to single spaces.
pub fn entity_key(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Case-insensitive, whitespace-normalized containment.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let needle = entity_key(needle);
    !needle.is_empty() && entity_key(haystack).contains(&needle)
}

/// Lowercased whitespace tokens with leading/trailing non-alphanumeric
/// characters trimmed. Used by the lexical scorers.
pub fn lexical_tokens(s: &str) -> Vec<String> {
    s.split_whitespace()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| !c.is_alphanumeric());
            (!t.is_empty()).then(|| t.to_lowercase())
        })
        .collect()
}

/// Answer normalization for EM/F1: lowercase, punctuation removed, articles
/// (a, an, the) dropped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    answer_tokens(s).join(" ")
}

/// Normalized answer tokens (see [`normalize_answer`]).
pub fn answer_tokens(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Bag-of-words F1 over normalized answer tokens with multiset intersection.
/// Zero when either side normalizes to nothing.
pub fn token_f1(prediction: &str, truth: &str) -> f64 {
    let pred = answer_tokens(prediction);
    let gold = answer_tokens(truth);
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (pred.len() + gold.len()) as f64
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Collapses all runs of whitespace (including newlines) to single spaces.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
