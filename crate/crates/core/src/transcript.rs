//! Reasoning transcript grammar.
//!
//! A step is written as
//!
//! ```text
//! Important entity: <e1>, <e2>
//! Subquery: <subquery>
//! <Reference>
//! Evidence 1: <item>
//! </Reference>
//! Summary: <summary>
//! ```
//!
//! and a path ends with a line starting exactly `Final answer: `. An optional
//! `Step <n>:` header line is tolerated. Reference blocks are inserted by the
//! engine; everything else is model output. Parsing never fails: deviations
//! are collected as [`Violation`]s, which the format reward consumes.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REF_OPEN: &str = "<Reference>";
pub const REF_CLOSE: &str = "</Reference>";
pub const ENTITY_PREFIX: &str = "Important entity:";
pub const SUBQUERY_PREFIX: &str = "Subquery:";
pub const SUMMARY_PREFIX: &str = "Summary:";
pub const ANSWER_PREFIX: &str = "Final answer: ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("unclosed {REF_OPEN} at char {0}")]
    UnclosedReference(usize),
    #[error("{REF_CLOSE} without opener at char {0}")]
    StrayClose(usize),
}

/// Character (code point) offsets, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// Byte ranges of reference-block interiors (tags excluded), in order. A
/// second opener before a closer counts as unclosed.
pub fn reference_blocks(text: &str) -> Result<Vec<Range<usize>>, TranscriptError> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let open = text[pos..].find(REF_OPEN).map(|i| i + pos);
        let close = text[pos..].find(REF_CLOSE).map(|i| i + pos);
        match (open, close) {
            (None, None) => return Ok(out),
            (_, Some(c)) if open.is_none_or(|o| c < o) => {
                return Err(TranscriptError::StrayClose(char_offset(text, c)));
            }
            (Some(o), close) => {
                let start = o + REF_OPEN.len();
                let next_open = text[start..].find(REF_OPEN).map(|i| i + start);
                match close {
                    Some(c) if next_open.is_none_or(|n| c < n) => {
                        out.push(start..c);
                        pos = c + REF_CLOSE.len();
                    }
                    _ => return Err(TranscriptError::UnclosedReference(char_offset(text, o))),
                }
            }
            (None, Some(_)) => unreachable!(),
        }
    }
}

/// One span per reference block, covering exactly the text strictly between
/// the tags.
pub fn compute_mask_spans(text: &str) -> Result<Vec<MaskSpan>, TranscriptError> {
    Ok(reference_blocks(text)?
        .into_iter()
        .map(|r| MaskSpan {
            start: char_offset(text, r.start),
            end: char_offset(text, r.end),
        })
        .collect())
}

pub fn render_reference_block<S: AsRef<str>>(items: &[S]) -> String {
    if items.is_empty() {
        return format!("{REF_OPEN}{REF_CLOSE}");
    }
    let mut s = String::from(REF_OPEN);
    for (i, item) in items.iter().enumerate() {
        s.push_str(&format!("\nEvidence {}: {}", i + 1, item.as_ref()));
    }
    s.push('\n');
    s.push_str(REF_CLOSE);
    s
}

/// Canonical text of one well-formed step.
pub fn render_step<S: AsRef<str>>(entities: &[String], subquery: &str, context: &[S], summary: &str) -> String {
    format!(
        "{ENTITY_PREFIX} {}\n{SUBQUERY_PREFIX} {subquery}\n{}\n{SUMMARY_PREFIX} {summary}",
        entities.join(", "),
        render_reference_block(context)
    )
}

pub fn render_answer(answer: &str) -> String {
    format!("{ANSWER_PREFIX}{answer}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Violation {
    MissingEntities,
    MalformedEntities(String),
    MissingSubquery,
    MissingReference,
    UnclosedReference,
    StrayReferenceClose,
    DuplicateReference,
    MissingSummary,
    OutOfOrder(String),
    UnexpectedText(String),
    EmptyAnswer,
    MissingAnswer,
}

enum Line<'a> {
    Header,
    Entities(Result<Vec<String>, String>),
    Subquery(&'a str),
    Summary(&'a str),
    Answer(&'a str),
    Other(&'a str),
}

fn is_header(line: &str) -> bool {
    line.strip_prefix("Step ")
        .and_then(|r| r.strip_suffix(':'))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_entities(rest: &str) -> Result<Vec<String>, String> {
    let parts: Vec<String> = rest.split(',').map(|p| p.trim().to_string()).collect();
    if parts.iter().any(String::is_empty) {
        return Err(rest.trim().to_string());
    }
    Ok(parts)
}

fn classify(raw: &str) -> Option<Line<'_>> {
    let line = raw.trim();
    if line.is_empty() {
        return None;
    }
    Some(if is_header(line) {
        Line::Header
    } else if let Some(r) = line.strip_prefix(ENTITY_PREFIX) {
        Line::Entities(parse_entities(r))
    } else if let Some(r) = line.strip_prefix(SUBQUERY_PREFIX) {
        Line::Subquery(r.trim())
    } else if let Some(r) = line.strip_prefix(SUMMARY_PREFIX) {
        Line::Summary(r.trim())
    } else if line == ANSWER_PREFIX.trim_end() {
        Line::Answer("")
    } else if let Some(r) = line.strip_prefix(ANSWER_PREFIX) {
        Line::Answer(r.trim())
    } else {
        Line::Other(line)
    })
}

/// Fields of one step recovered from model text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepFields {
    pub key_entities: Vec<String>,
    pub subquery: Option<String>,
    pub summary: Option<String>,
    pub violations: Vec<Violation>,
    #[serde(skip)]
    entities_seen: bool,
}

impl StepFields {
    fn set_entities(&mut self, r: Result<Vec<String>, String>) {
        self.entities_seen = true;
        match r {
            Ok(e) => self.key_entities = e,
            Err(raw) => self.violations.push(Violation::MalformedEntities(raw)),
        }
    }

    fn set_subquery(&mut self, s: &str) {
        if s.is_empty() {
            self.violations.push(Violation::MissingSubquery);
        }
        self.subquery = Some(s.to_string());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedSegment {
    Step(StepFields),
    FinalAnswer { answer: String, violations: Vec<Violation> },
    /// Neither a subquery nor an answer could be recovered.
    Violation(Vec<Violation>),
}

/// Parses the model's output since the last reference block: entities and
/// subquery (optionally a summary), or a final answer.
pub fn parse_step(segment: &str) -> ParsedSegment {
    let mut f = StepFields::default();
    let mut answer: Option<String> = None;
    for line in segment.lines().filter_map(classify) {
        match line {
            Line::Header => {}
            Line::Entities(r) if !f.entities_seen && f.subquery.is_none() && answer.is_none() => f.set_entities(r),
            Line::Entities(_) => f.violations.push(Violation::OutOfOrder(ENTITY_PREFIX.into())),
            Line::Subquery(s) if f.subquery.is_none() && answer.is_none() => f.set_subquery(s),
            Line::Subquery(_) => f.violations.push(Violation::OutOfOrder(SUBQUERY_PREFIX.into())),
            Line::Summary(s) if f.subquery.is_some() && f.summary.is_none() => f.summary = Some(s.to_string()),
            Line::Summary(_) => f.violations.push(Violation::OutOfOrder(SUMMARY_PREFIX.into())),
            Line::Answer(a) if f.subquery.is_none() && answer.is_none() => answer = Some(a.to_string()),
            Line::Answer(_) => f.violations.push(Violation::OutOfOrder(ANSWER_PREFIX.trim_end().into())),
            Line::Other(t) => f.violations.push(Violation::UnexpectedText(t.to_string())),
        }
    }
    if let Some(answer) = answer {
        let mut violations = f.violations;
        if f.entities_seen {
            violations.push(Violation::OutOfOrder(ENTITY_PREFIX.into()));
        }
        if answer.is_empty() {
            violations.push(Violation::EmptyAnswer);
        }
        return ParsedSegment::FinalAnswer { answer, violations };
    }
    if f.subquery.is_none() {
        f.violations.push(Violation::MissingSubquery);
        return ParsedSegment::Violation(f.violations);
    }
    if !f.entities_seen {
        f.violations.push(Violation::MissingEntities);
    }
    ParsedSegment::Step(f)
}

/// Parses a generated summary segment.
pub fn parse_summary(segment: &str) -> (String, Vec<Violation>) {
    let mut summary = None;
    let mut violations = Vec::new();
    for line in segment.lines().filter_map(classify) {
        match line {
            Line::Header => {}
            Line::Summary(s) if summary.is_none() => summary = Some(s.to_string()),
            Line::Summary(_) => violations.push(Violation::OutOfOrder(SUMMARY_PREFIX.into())),
            Line::Other(t) => violations.push(Violation::UnexpectedText(t.to_string())),
            _ => violations.push(Violation::OutOfOrder(segment.trim().lines().next().unwrap_or("").into())),
        }
    }
    if summary.is_none() {
        violations.push(Violation::MissingSummary);
    }
    (summary.unwrap_or_default(), violations)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedStep {
    pub key_entities: Vec<String>,
    pub subquery: String,
    pub context: Vec<String>,
    pub has_reference: bool,
    pub summary: String,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedTranscript {
    pub steps: Vec<ParsedStep>,
    pub final_answer: Option<String>,
    /// Violations not attributable to a single step.
    pub violations: Vec<Violation>,
}

impl ParsedTranscript {
    pub fn is_well_formed(&self) -> bool {
        self.violations.is_empty()
            && self.final_answer.as_deref().is_some_and(|a| !a.is_empty())
            && self.steps.iter().all(|s| s.violations.is_empty() && s.has_reference)
    }
}

enum Piece<'a> {
    Text(&'a str),
    Block(&'a str),
}

/// Tolerant splitter: an unclosed opener swallows the rest, a stray closer
/// is dropped. Both are reported.
fn pieces<'a>(text: &'a str, violations: &mut Vec<Violation>) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let open = rest.find(REF_OPEN);
        let close = rest.find(REF_CLOSE);
        match (open, close) {
            (None, None) => {
                out.push(Piece::Text(rest));
                return out;
            }
            (_, Some(c)) if open.is_none_or(|o| c < o) => {
                violations.push(Violation::StrayReferenceClose);
                out.push(Piece::Text(&rest[..c]));
                rest = &rest[c + REF_CLOSE.len()..];
            }
            (Some(o), _) => {
                out.push(Piece::Text(&rest[..o]));
                let body = &rest[o + REF_OPEN.len()..];
                let close = body.find(REF_CLOSE);
                let reopen = body.find(REF_OPEN);
                match close {
                    Some(c) if reopen.is_none_or(|n| c < n) => {
                        out.push(Piece::Block(&body[..c]));
                        rest = &body[c + REF_CLOSE.len()..];
                    }
                    _ => {
                        violations.push(Violation::UnclosedReference);
                        return out;
                    }
                }
            }
            (None, Some(_)) => unreachable!(),
        }
    }
}

fn evidence_items(block: &str) -> Vec<String> {
    block
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.strip_prefix("Evidence ")
                .and_then(|r| r.split_once(": "))
                .filter(|(n, _)| n.bytes().all(|b| b.is_ascii_digit()) && !n.is_empty())
                .map_or(l, |(_, t)| t)
                .to_string()
        })
        .collect()
}

#[derive(Default)]
struct Builder {
    f: StepFields,
    context: Option<Vec<String>>,
}

impl Builder {
    fn finish(mut self) -> ParsedStep {
        if !self.f.entities_seen {
            self.f.violations.push(Violation::MissingEntities);
        }
        if self.f.subquery.is_none() {
            self.f.violations.push(Violation::MissingSubquery);
        }
        if self.context.is_none() {
            self.f.violations.push(Violation::MissingReference);
        }
        if self.f.summary.is_none() {
            self.f.violations.push(Violation::MissingSummary);
        }
        ParsedStep {
            key_entities: self.f.key_entities,
            subquery: self.f.subquery.unwrap_or_default(),
            has_reference: self.context.is_some(),
            context: self.context.unwrap_or_default(),
            summary: self.f.summary.unwrap_or_default(),
            violations: self.f.violations,
        }
    }

    fn started(&self) -> bool {
        self.f.entities_seen || self.f.subquery.is_some() || self.context.is_some() || self.f.summary.is_some()
    }
}

/// Re-parses a full transcript into structured steps.
pub fn parse_transcript(text: &str) -> ParsedTranscript {
    let mut out = ParsedTranscript::default();
    let pieces = pieces(text, &mut out.violations);
    let mut cur = Builder::default();
    let mut answered = false;

    let next = |cur: &mut Builder, out: &mut ParsedTranscript| {
        let done = std::mem::take(cur);
        if done.started() {
            out.steps.push(done.finish());
        }
    };

    for piece in pieces {
        let text = match piece {
            Piece::Block(b) => {
                if answered {
                    out.violations.push(Violation::OutOfOrder(REF_OPEN.into()));
                } else if cur.context.is_some() {
                    cur.f.violations.push(Violation::DuplicateReference);
                } else {
                    cur.context = Some(evidence_items(b));
                }
                continue;
            }
            Piece::Text(t) => t,
        };
        for line in text.lines().filter_map(classify) {
            if answered {
                if !matches!(line, Line::Header) {
                    out.violations.push(Violation::OutOfOrder(ANSWER_PREFIX.trim_end().into()));
                }
                continue;
            }
            match line {
                Line::Header => {}
                Line::Entities(r) => {
                    if cur.f.entities_seen || cur.f.subquery.is_some() || cur.context.is_some() || cur.f.summary.is_some() {
                        next(&mut cur, &mut out);
                    }
                    cur.f.set_entities(r);
                }
                Line::Subquery(s) => {
                    if cur.f.subquery.is_some() || cur.context.is_some() || cur.f.summary.is_some() {
                        next(&mut cur, &mut out);
                    }
                    cur.f.set_subquery(s);
                }
                Line::Summary(s) => {
                    if cur.f.summary.is_some() {
                        next(&mut cur, &mut out);
                    }
                    cur.f.summary = Some(s.to_string());
                }
                Line::Answer(a) => {
                    next(&mut cur, &mut out);
                    if a.is_empty() {
                        out.violations.push(Violation::EmptyAnswer);
                    }
                    out.final_answer = Some(a.to_string());
                    answered = true;
                }
                Line::Other(t) => {
                    let v = Violation::UnexpectedText(t.to_string());
                    if cur.started() {
                        cur.f.violations.push(v);
                    } else {
                        out.violations.push(v);
                    }
                }
            }
        }
    }
    next(&mut cur, &mut out);
    if !answered {
        out.violations.push(Violation::MissingAnswer);
    }
    out
}
