//! Triplet extraction from chunks.
//!
//! The default [`RuleExtractor`] is deterministic: it fires on parenthetical
//! appositives (`X (born in Y)`) and on `X <verb phrase> Y` clauses drawn from
//! a closed verb list, where X and Y are runs of capitalized words.

use std::error::Error as StdError;

use super::{Chunk, CorpusError, Triplet};
use crate::generate::{GenerationMeta, GenerationRequest, Generator, Phase};

/// A (head, relation, tail) before provenance is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriplet {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractorOutput {
    pub triplets: Vec<RawTriplet>,
    /// Output items the extractor could not parse.
    pub skipped: usize,
}

pub trait TripletExtractor: Send + Sync {
    fn extract(&self, chunk: &Chunk) -> Result<ExtractorOutput, Box<dyn StdError + Send + Sync>>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub triplets: Vec<Triplet>,
    pub skipped: usize,
}

/// Runs `extractor` on one chunk and stamps every triplet with the chunk id.
pub fn extract_triplets(
    chunk: &Chunk,
    extractor: &dyn TripletExtractor,
) -> Result<Extraction, CorpusError> {
    let out = extractor.extract(chunk).map_err(|e| CorpusError::Extraction {
        chunk_id: chunk.id.clone(),
        message: e.to_string(),
    })?;
    if out.skipped > 0 {
        log::warn!("chunk {}: skipped {} unparsable extractor item(s)", chunk.id, out.skipped);
    }
    let mut skipped = out.skipped;
    let mut triplets = Vec::with_capacity(out.triplets.len());
    for t in out.triplets {
        if t.head.trim().is_empty() || t.relation.trim().is_empty() || t.tail.trim().is_empty() {
            skipped += 1;
            continue;
        }
        triplets.push(Triplet {
            head: t.head.trim().to_string(),
            relation: t.relation.trim().to_string(),
            tail: t.tail.trim().to_string(),
            source_chunk_id: Some(chunk.id.clone()),
        });
    }
    Ok(Extraction { triplets, skipped })
}

// Longest phrases first so "married to" wins over "married".
const VERB_PHRASES: &[&str] = &[
    "is the capital of",
    "was succeeded by",
    "was founded by",
    "is located in",
    "was born in",
    "is a member of",
    "capital of",
    "succeeded by",
    "founded by",
    "located in",
    "member of",
    "born in",
    "died in",
    "lived in",
    "worked in",
    "studied at",
    "educated at",
    "buried in",
    "part of",
    "founder of",
    "son of",
    "daughter of",
    "father of",
    "mother of",
    "married to",
    "plays for",
    "married",
    "directed",
    "wrote",
    "founded",
];

const AUXILIARIES: &[&str] = &["is", "was", "are", "were", "has", "had", "have"];
const NAME_CONNECTORS: &[&str] = &["von", "van", "de", "der", "da", "di", "du", "la", "le"];
const LEADING_ARTICLES: &[&str] = &["the", "a", "an"];

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleExtractor;

#[derive(Debug)]
struct Tok<'a> {
    word: &'a str,
    cap: bool,
    /// Raw token ends with clause punctuation.
    stop_after: bool,
}

fn toks(text: &str) -> Vec<Tok<'_>> {
    text.split_whitespace()
        .filter_map(|raw| {
            let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if word.is_empty() {
                return None;
            }
            let cap = word.chars().next().is_some_and(|c| c.is_uppercase());
            let stop_after = raw.ends_with([',', ';', ':', '.', '!', '?', '"', '\'']);
            Some(Tok { word, cap, stop_after })
        })
        .collect()
}

fn is_connector(t: &Tok<'_>) -> bool {
    NAME_CONNECTORS.contains(&t.word)
}

/// Capitalized run ending at `end` (inclusive), article-stripped.
fn run_ending_at(ts: &[Tok<'_>], end: usize) -> Option<String> {
    if !ts[end].cap {
        return None;
    }
    let mut start = end;
    while start > 0 {
        let prev = &ts[start - 1];
        if prev.stop_after {
            break;
        }
        if prev.cap {
            start -= 1;
        } else if is_connector(prev) && start >= 2 && ts[start - 2].cap && !ts[start - 2].stop_after {
            start -= 2;
        } else {
            break;
        }
    }
    join_run(&ts[start..=end])
}

/// Capitalized run starting at `start`.
fn run_starting_at(ts: &[Tok<'_>], start: usize) -> Option<String> {
    if start >= ts.len() || !ts[start].cap {
        return None;
    }
    let mut end = start;
    while end + 1 < ts.len() && !ts[end].stop_after {
        let next = &ts[end + 1];
        if next.cap {
            end += 1;
        } else if is_connector(next) && end + 2 < ts.len() && ts[end + 2].cap && !next.stop_after {
            end += 2;
        } else {
            break;
        }
    }
    join_run(&ts[start..=end])
}

fn join_run(run: &[Tok<'_>]) -> Option<String> {
    let skip = usize::from(
        run.len() > 1 && LEADING_ARTICLES.contains(&run[0].word.to_lowercase().as_str()),
    );
    if run.len() == 1 && LEADING_ARTICLES.contains(&run[0].word.to_lowercase().as_str()) {
        return None;
    }
    Some(run[skip..].iter().map(|t| t.word).collect::<Vec<_>>().join(" "))
}

/// Matches a verb phrase at `i`; returns (phrase, token length).
fn phrase_at(ts: &[Tok<'_>], i: usize) -> Option<(&'static str, usize)> {
    'outer: for p in VERB_PHRASES {
        let words: Vec<&str> = p.split(' ').collect();
        if i + words.len() > ts.len() {
            continue;
        }
        for (k, w) in words.iter().enumerate() {
            let t = &ts[i + k];
            if !t.word.eq_ignore_ascii_case(w) || (k + 1 < words.len() && t.stop_after) {
                continue 'outer;
            }
        }
        return Some((p, words.len()));
    }
    None
}

/// Relation label: the phrase without a leading auxiliary ("was born in" → "born in").
fn relation_label(phrase: &str) -> String {
    let mut words: Vec<&str> = phrase.split(' ').collect();
    if words.len() > 1 && AUXILIARIES.contains(&words[0]) {
        words.remove(0);
    }
    if words.len() > 2 && words[0] == "the" {
        words.remove(0);
    }
    if words.len() > 2 && words[0] == "a" {
        words.remove(0);
    }
    words.join(" ")
}

fn clause_triplets(ts: &[Tok<'_>], out: &mut Vec<RawTriplet>) {
    let mut i = 1;
    while i < ts.len() {
        let Some((phrase, len)) = phrase_at(ts, i) else {
            i += 1;
            continue;
        };
        // skip up to two fillers: "was the son of"
        let mut subj_end = i - 1;
        for _ in 0..2 {
            let w = ts[subj_end].word.to_lowercase();
            let filler = AUXILIARIES.contains(&w.as_str()) || LEADING_ARTICLES.contains(&w.as_str());
            if ts[subj_end].cap || !filler || subj_end == 0 {
                break;
            }
            subj_end -= 1;
        }
        let last = &ts[i + len - 1];
        let subject = if ts[subj_end].stop_after { None } else { run_ending_at(ts, subj_end) };
        let object = if last.stop_after { None } else { run_starting_at(ts, i + len) };
        if let (Some(h), Some(t)) = (subject, object) {
            out.push(RawTriplet { head: h, relation: relation_label(phrase), tail: t });
        }
        i += len;
    }
}

/// Splits off `( ... )` groups. Returns the outer text and, per group, its
/// content and the outer token count preceding it.
fn split_parentheticals(sentence: &str) -> (String, Vec<(String, usize)>) {
    let mut outer = String::new();
    let mut groups = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for c in sentence.chars() {
        match c {
            '(' => {
                if depth == 0 {
                    current.clear();
                } else {
                    current.push(c);
                }
                depth += 1;
            }
            ')' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    groups.push((current.clone(), toks(&outer).len()));
                    outer.push(' ');
                } else {
                    current.push(c);
                }
            }
            _ if depth > 0 => current.push(c),
            _ => outer.push(c),
        }
    }
    (outer, groups)
}

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in bytes.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next_ws = bytes.get(k + 1).is_none_or(|&(_, n)| n.is_whitespace());
            if next_ws {
                out.push(&text[start..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl RuleExtractor {
    pub fn extract_text(&self, text: &str) -> Vec<RawTriplet> {
        let mut out = Vec::new();
        for sentence in sentences(text) {
            let (outer, groups) = split_parentheticals(sentence);
            let ts = toks(&outer);
            for (content, pos) in &groups {
                if *pos == 0 {
                    continue;
                }
                let inner = toks(content);
                if let Some((phrase, len)) = phrase_at(&inner, 0) {
                    let subject = run_ending_at(&ts, pos - 1);
                    let object = run_starting_at(&inner, len);
                    if let (Some(h), Some(t)) = (subject, object) {
                        out.push(RawTriplet { head: h, relation: relation_label(phrase), tail: t });
                    }
                }
            }
            clause_triplets(&ts, &mut out);
        }
        let mut seen = std::collections::HashSet::new();
        out.retain(|t| seen.insert(t.clone().head + "\u{1}" + &t.relation + "\u{1}" + &t.tail));
        out
    }
}

impl TripletExtractor for RuleExtractor {
    fn extract(&self, chunk: &Chunk) -> Result<ExtractorOutput, Box<dyn StdError + Send + Sync>> {
        Ok(ExtractorOutput {
            triplets: self.extract_text(&chunk.text),
            skipped: 0,
        })
    }
}

/// Parses `head | relation | tail` lines (optionally parenthesized). Lines
/// that do not split into three non-empty fields are counted as skipped.
pub fn parse_triplet_lines(text: &str) -> ExtractorOutput {
    let mut out = ExtractorOutput::default();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let body = line
            .trim_start_matches(['-', '*', ' '])
            .trim_start_matches('(')
            .trim_end_matches(')');
        let parts: Vec<&str> = body.split('|').map(str::trim).collect();
        if parts.len() == 3 && parts.iter().all(|p| !p.is_empty()) {
            out.triplets.push(RawTriplet::new(parts[0], parts[1], parts[2]));
        } else {
            out.skipped += 1;
        }
    }
    out
}

pub const EXTRACTION_PROMPT: &str = "Extract knowledge triplets from the passage below. \
Write one triplet per line as: head | relation | tail\n\nTitle: {title}\nPassage: {text}\n\nTriplets:\n";

/// Extraction through a text-generation backend.
pub struct GeneratorExtractor<G> {
    pub generator: G,
    pub prompt_template: String,
    pub max_new_tokens: u32,
}

impl<G: Generator> GeneratorExtractor<G> {
    pub fn new(generator: G) -> Self {
        Self {
            generator,
            prompt_template: EXTRACTION_PROMPT.to_string(),
            max_new_tokens: 512,
        }
    }
}

impl<G: Generator> TripletExtractor for GeneratorExtractor<G> {
    fn extract(&self, chunk: &Chunk) -> Result<ExtractorOutput, Box<dyn StdError + Send + Sync>> {
        let prompt = self
            .prompt_template
            .replace("{title}", &chunk.title)
            .replace("{text}", &chunk.text);
        let text = self.generator.generate(&GenerationRequest {
            prompt,
            stop: Vec::new(),
            temperature: 0.0,
            max_new_tokens: self.max_new_tokens,
            meta: GenerationMeta {
                question: chunk.id.clone(),
                step: 0,
                phase: Some(Phase::Extract),
                variant: 0,
            },
        })?;
        Ok(parse_triplet_lines(&text))
    }
}
