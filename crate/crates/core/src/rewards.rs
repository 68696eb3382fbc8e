//! Path rewards: outcome (token F1), format, and the process reward built
//! from entity/subquery consistency and evidence memory vectors.

use serde::{Deserialize, Serialize};

use crate::agent::{ReasoningPath, ReasoningStep, Termination};
use crate::retrieval::{RetrievalError, Scorer};
use crate::text::{contains_normalized, sigmoid, token_f1};
use crate::transcript::parse_transcript;

pub const W_CONSISTENCY: f64 = 0.1;
pub const W_MEMORY: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopKind {
    Single,
    #[default]
    Multi,
}

/// One question with its ground truth. Shared by scoring and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub hop_kind: HopKind,
    /// Golden evidence strings.
    #[serde(default)]
    pub golden: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldenEvidence {
    pub items: Vec<String>,
}

impl GoldenEvidence {
    pub fn new(items: Vec<String>) -> Self {
        Self {
            items: items.into_iter().filter(|s| !s.trim().is_empty()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_outcome: f64,
    pub r_format: f64,
    pub r_consistency: f64,
    pub r_q: f64,
    pub r_c: f64,
    pub r_s: f64,
    pub r_process: f64,
    /// Mean of format, outcome and process.
    pub total: f64,
    pub m_q: Vec<f64>,
    pub m_c: Vec<f64>,
    pub m_s: Vec<f64>,
}

impl RewardBreakdown {
    /// r_format + r_outcome + r_process, the pair-ranking key.
    pub fn sum(&self) -> f64 {
        self.r_format + self.r_outcome + self.r_process
    }

    fn finish(mut self) -> Self {
        self.total = self.sum() / 3.0;
        self
    }
}

/// Bag-of-words F1 over normalized tokens (multiset intersection).
pub fn outcome_reward(answer: &str, truth: &str) -> f64 {
    token_f1(answer, truth)
}

/// Best F1 over several accepted answers; 0 without an answer.
pub fn outcome_reward_any(answer: Option<&str>, truths: &[String]) -> f64 {
    let Some(a) = answer else { return 0.0 };
    truths.iter().map(|t| outcome_reward(a, t)).fold(0.0, f64::max)
}

/// 1 iff the transcript re-parses cleanly, every step has a reference
/// block, and the path ended on a `Final answer: ` line.
pub fn format_reward(path: &ReasoningPath) -> f64 {
    let ok = path.terminated_by == Termination::Answer
        && path.violations.is_empty()
        && path.steps.iter().all(|s| s.violations.is_empty())
        && {
            let parsed = parse_transcript(&path.transcript);
            parsed.is_well_formed() && parsed.steps.len() == path.steps.len()
        };
    f64::from(u8::from(ok))
}

/// CEM: every key entity occurs in the subquery. A step with no entities
/// scores 0.
pub fn cover_exact_match(step: &ReasoningStep) -> f64 {
    let ok = !step.key_entities.is_empty()
        && step.key_entities.iter().all(|e| contains_normalized(&step.subquery, e));
    f64::from(u8::from(ok))
}

pub fn consistency_reward(path: &ReasoningPath) -> f64 {
    if path.steps.is_empty() {
        return 0.0;
    }
    path.steps.iter().map(cover_exact_match).sum::<f64>() / path.steps.len() as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryVectors {
    pub m_q: Vec<f64>,
    pub m_c: Vec<f64>,
    pub m_s: Vec<f64>,
}

/// Max over candidates of σ(scorer(evidence, candidate)); 0 when empty.
fn best(scorer: &dyn Scorer, evidence: &str, candidates: &[&str]) -> Result<f64, RetrievalError> {
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let scores = scorer.score(evidence, candidates, candidates.len())?;
    if scores.len() != candidates.len() {
        return Err(RetrievalError::ScoreCount {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RetrievalError::NonFiniteScore(i));
    }
    Ok(scores.into_iter().map(sigmoid).fold(0.0, f64::max))
}

/// Per golden item, the best similarity to any subquery, any context item,
/// and any summary along the path. Arguments are (evidence, candidate).
pub fn memory_vectors(
    path: &ReasoningPath,
    golden: &GoldenEvidence,
    scorer: &dyn Scorer,
) -> Result<MemoryVectors, RetrievalError> {
    let subqueries: Vec<&str> = path.steps.iter().map(|s| s.subquery.as_str()).collect();
    let contexts: Vec<&str> = path.steps.iter().flat_map(|s| s.context.iter().map(|c| c.text.as_str())).collect();
    let summaries: Vec<&str> = path.steps.iter().map(|s| s.summary.as_str()).collect();
    let mut m = MemoryVectors::default();
    for g in &golden.items {
        m.m_q.push(best(scorer, g, &subqueries)?);
        m.m_c.push(best(scorer, g, &contexts)?);
        m.m_s.push(best(scorer, g, &summaries)?);
    }
    Ok(m)
}

/// Σm / k, capped at 1 (the sum can exceed k when l > k).
pub fn normalized_memory(m: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    (m.iter().sum::<f64>() / k as f64).min(1.0)
}

pub fn aggregate_process(r_consistency: f64, r_q: f64, r_c: f64, r_s: f64) -> f64 {
    W_CONSISTENCY * r_consistency + W_MEMORY * r_q + W_MEMORY * r_c + W_MEMORY * r_s
}

/// Fills the process fields of `b` (outcome and format already set).
/// Single-hop: outcome divided by k (floor 1), process 0.
pub fn process_reward(
    mut b: RewardBreakdown,
    path: &ReasoningPath,
    golden: &GoldenEvidence,
    scorer: &dyn Scorer,
    hop: HopKind,
) -> Result<RewardBreakdown, RetrievalError> {
    let k = path.steps.len();
    match hop {
        HopKind::Single => {
            b.r_outcome /= k.max(1) as f64;
            b.r_consistency = 0.0;
            b.r_q = 0.0;
            b.r_c = 0.0;
            b.r_s = 0.0;
            b.r_process = 0.0;
        }
        HopKind::Multi if k == 0 => {
            b.r_consistency = 0.0;
            b.r_process = 0.0;
        }
        HopKind::Multi => {
            let m = memory_vectors(path, golden, scorer)?;
            b.r_consistency = consistency_reward(path);
            b.r_q = normalized_memory(&m.m_q, k);
            b.r_c = normalized_memory(&m.m_c, k);
            b.r_s = normalized_memory(&m.m_s, k);
            b.r_process = aggregate_process(b.r_consistency, b.r_q, b.r_c, b.r_s);
            b.m_q = m.m_q;
            b.m_c = m.m_c;
            b.m_s = m.m_s;
        }
    }
    Ok(b.finish())
}

pub fn score_path(
    path: &ReasoningPath,
    answers: &[String],
    golden: &GoldenEvidence,
    scorer: &dyn Scorer,
    hop: HopKind,
) -> Result<RewardBreakdown, RetrievalError> {
    let b = RewardBreakdown {
        r_outcome: outcome_reward_any(path.final_answer.as_deref(), answers),
        r_format: format_reward(path),
        ..Default::default()
    };
    process_reward(b, path, golden, scorer, hop)
}
