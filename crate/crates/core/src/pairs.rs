//! Preference pairs from scored samples, and SFT records assembled from
//! question decompositions. Both carry character-offset mask spans over
//! reference-block interiors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{PathRecord, ReasoningPath};
use crate::corpus::Triplet;
use crate::kag::render_triplet;
use crate::retrieval::{RetrievalError, Scorer};
use crate::rewards::{score_path, GoldenEvidence, HopKind, QaRecord, RewardBreakdown};
use crate::text::{collapse_whitespace, contains_normalized, entity_key};
use crate::transcript::{render_answer, render_step, TranscriptError};

pub use crate::transcript::{compute_mask_spans, MaskSpan};

pub const EASY_MAX_OUTCOME: f64 = 0.3;
pub const HARD_OUTCOME_MARGIN: f64 = 0.3;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("path {path_id} refers to unknown question {question_id:?}")]
    UnknownQuestion { question_id: String, path_id: usize },
    #[error("scoring question {question_id:?} path {path_id}: {source}")]
    Scorer {
        question_id: String,
        path_id: usize,
        #[source]
        source: RetrievalError,
    },
}

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("decomposition {0:?} has no hops")]
    NoHops(String),
    #[error("decomposition {id:?} hop {hop}: {reason}")]
    InvalidHop { id: String, hop: usize, reason: String },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

/// A scored sample: one sampled path for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub question_id: String,
    pub hop_kind: HopKind,
    pub path_id: usize,
    pub path: ReasoningPath,
    pub rewards: RewardBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionKind {
    Format,
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTriple {
    pub format: f64,
    pub outcome: f64,
    pub process: f64,
}

impl From<&RewardBreakdown> for RewardTriple {
    fn from(b: &RewardBreakdown) -> Self {
        Self {
            format: b.r_format,
            outcome: b.r_outcome,
            process: b.r_process,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub instruction: String,
    pub question: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_mask_spans: Vec<MaskSpan>,
    pub rejected_mask_spans: Vec<MaskSpan>,
    pub rejection_kind: RejectionKind,
    pub chosen_path_id: usize,
    pub rejected_path_id: usize,
    pub chosen_rewards: RewardTriple,
    pub rejected_rewards: RewardTriple,
}

/// Scores every path against its question's record, in parallel; output
/// order follows `paths`.
pub fn score_samples(paths: &[PathRecord], qa: &[QaRecord], scorer: &dyn Scorer) -> Result<Vec<SampleRecord>, ScoreError> {
    let by_id: HashMap<&str, &QaRecord> = qa.iter().map(|q| (q.id.as_str(), q)).collect();
    paths
        .par_iter()
        .map(|p| {
            let q = by_id.get(p.question_id.as_str()).ok_or_else(|| ScoreError::UnknownQuestion {
                question_id: p.question_id.clone(),
                path_id: p.path_id,
            })?;
            let golden = GoldenEvidence::new(q.golden.clone());
            let rewards = score_path(&p.path, &q.answers, &golden, scorer, q.hop_kind).map_err(|source| {
                ScoreError::Scorer {
                    question_id: p.question_id.clone(),
                    path_id: p.path_id,
                    source,
                }
            })?;
            Ok(SampleRecord {
                question_id: p.question_id.clone(),
                hop_kind: q.hop_kind,
                path_id: p.path_id,
                path: p.path.clone(),
                rewards,
            })
        })
        .collect()
}

/// Chosen-set membership.
pub fn is_chosen(r: &RewardBreakdown, hop: HopKind) -> bool {
    if r.r_format != 1.0 {
        return false;
    }
    match hop {
        HopKind::Single => r.r_outcome == 1.0,
        HopKind::Multi => (r.r_outcome == 1.0 && r.r_process >= 0.7) || (r.r_outcome >= 0.8 && r.r_process >= 0.8),
    }
}

/// Indices of the chosen samples, by descending total, ties by path id.
pub fn select_chosen(samples: &[SampleRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len())
        .filter(|&i| is_chosen(&samples[i].rewards, samples[i].hop_kind))
        .collect();
    idx.sort_by(|&a, &b| {
        samples[b]
            .rewards
            .total
            .total_cmp(&samples[a].rewards.total)
            .then(samples[a].path_id.cmp(&samples[b].path_id))
    });
    idx
}

/// Indices ascending by r_format + r_outcome + r_process, ties by path id.
pub fn rank_candidates(samples: &[SampleRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| {
        samples[a]
            .rewards
            .sum()
            .total_cmp(&samples[b].rewards.sum())
            .then(samples[a].path_id.cmp(&samples[b].path_id))
    });
    idx
}

/// Which rejection kind, if any, `cand` is relative to `chosen`. Single-hop
/// admits only format and easy.
pub fn rejection_kind(chosen: &RewardBreakdown, cand: &RewardBreakdown, hop: HopKind) -> Option<RejectionKind> {
    if cand.r_format == 0.0 {
        return Some(RejectionKind::Format);
    }
    if cand.r_format != 1.0 {
        return None;
    }
    if cand.r_outcome <= EASY_MAX_OUTCOME {
        return Some(RejectionKind::Easy);
    }
    let hard = hop == HopKind::Multi
        && cand.r_outcome > EASY_MAX_OUTCOME
        && cand.r_outcome <= chosen.r_outcome - HARD_OUTCOME_MARGIN
        && cand.r_process <= chosen.r_process;
    hard.then_some(RejectionKind::Hard)
}

/// Scans `ranked[cursor..]` for the first rejection of `chosen`. On a match
/// returns (position in `ranked`, kind, cursor just past it); otherwise the
/// cursor stays where it was.
pub fn match_rejected(
    chosen: &SampleRecord,
    ranked: &[&SampleRecord],
    cursor: usize,
) -> Option<(usize, RejectionKind, usize)> {
    ranked.iter().enumerate().skip(cursor).find_map(|(i, cand)| {
        if cand.path_id == chosen.path_id {
            return None;
        }
        rejection_kind(&chosen.rewards, &cand.rewards, chosen.hop_kind).map(|k| (i, k, i + 1))
    })
}

fn pairs_for_question(samples: &[SampleRecord], instruction: &str) -> Result<Vec<PreferencePair>, PairsError> {
    let ranked_idx = rank_candidates(samples);
    let ranked: Vec<&SampleRecord> = ranked_idx.iter().map(|&i| &samples[i]).collect();
    let mut cursor = 0;
    let mut out = Vec::new();
    for c in select_chosen(samples) {
        let chosen = &samples[c];
        let Some((pos, kind, next)) = match_rejected(chosen, &ranked, cursor) else {
            continue;
        };
        cursor = next;
        let rejected = ranked[pos];
        out.push(PreferencePair {
            question_id: chosen.question_id.clone(),
            instruction: instruction.replace("{question}", &chosen.path.question),
            question: chosen.path.question.clone(),
            chosen: chosen.path.transcript.clone(),
            rejected: rejected.path.transcript.clone(),
            chosen_mask_spans: compute_mask_spans(&chosen.path.transcript)?,
            rejected_mask_spans: compute_mask_spans(&rejected.path.transcript).unwrap_or_default(),
            rejection_kind: kind,
            chosen_path_id: chosen.path_id,
            rejected_path_id: rejected.path_id,
            chosen_rewards: (&chosen.rewards).into(),
            rejected_rewards: (&rejected.rewards).into(),
        });
    }
    Ok(out)
}

/// Groups samples by question id (first-seen order) and pairs each group
/// independently. `instruction` may contain `{question}`.
pub fn build_pairs(samples: &[SampleRecord], instruction: &str) -> Result<Vec<PreferencePair>, PairsError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<SampleRecord>> = HashMap::new();
    for s in samples {
        let g = groups.entry(&s.question_id).or_insert_with(|| {
            order.push(&s.question_id);
            Vec::new()
        });
        g.push(s.clone());
    }
    let per_question: Vec<Result<Vec<PreferencePair>, PairsError>> = order
        .par_iter()
        .map(|q| pairs_for_question(&groups[q], instruction))
        .collect();
    let mut out = Vec::new();
    for r in per_question {
        out.extend(r?);
    }
    Ok(out)
}

/// A supporting (head, relation, tail) fact in a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportTriplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionHop {
    pub subquery: String,
    /// Derived from the supporting triplets when absent.
    #[serde(default)]
    pub entities: Option<Vec<String>>,
    pub paragraphs: Vec<String>,
    pub triplets: Vec<SupportTriplet>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub id: String,
    pub question: String,
    pub hops: Vec<DecompositionHop>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub instruction: String,
    pub question: String,
    pub transcript: String,
    pub mask_spans: Vec<MaskSpan>,
}

pub const SUMMARY_TEMPLATES: [&str; 4] = [
    "The facts {facts} show that the answer to this subquery is {answer}.",
    "Based on {facts}, the answer is {answer}.",
    "Key evidence: {facts}. Therefore the subquery is answered by {answer}.",
    "Given that {facts}, it follows that {answer} answers this subquery.",
];

/// Record rng: ChaCha8 seeded from sha256(seed, id).
pub fn record_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&d[..32]);
    ChaCha8Rng::from_seed(s)
}

fn to_triplet(t: &SupportTriplet) -> Triplet {
    Triplet::new(&t.head, &t.relation, &t.tail, None)
}

/// Entities of a hop: triplet heads/tails mentioned in the subquery, else
/// all heads. First-seen order, deduplicated by entity key.
pub fn hop_entities(hop: &DecompositionHop) -> Vec<String> {
    if let Some(e) = &hop.entities {
        return e.clone();
    }
    fn push(out: &mut Vec<String>, e: &str) {
        if !out.iter().any(|x| entity_key(x) == entity_key(e)) {
            out.push(e.trim().to_string());
        }
    }
    let mut out: Vec<String> = Vec::new();
    for t in &hop.triplets {
        for e in [&t.head, &t.tail] {
            if contains_normalized(&hop.subquery, e) {
                push(&mut out, e);
            }
        }
    }
    if out.is_empty() {
        hop.triplets.iter().for_each(|t| push(&mut out, &t.head));
    }
    out
}

/// Golden paragraphs with each rendered triplet inserted, in order, at a
/// uniformly drawn position `0..=len` of the growing list.
pub fn simulate_context(hop: &DecompositionHop, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut items: Vec<String> = hop.paragraphs.iter().map(|p| collapse_whitespace(p)).collect();
    for t in &hop.triplets {
        let pos = rng.gen_range(0..=items.len());
        items.insert(pos, render_triplet(&to_triplet(t)));
    }
    items
}

/// Two-part summary: the supporting facts, then the sub-answer.
pub fn summarize(hop: &DecompositionHop, rng: &mut ChaCha8Rng) -> String {
    let facts = hop
        .triplets
        .iter()
        .map(|t| to_triplet(t).render())
        .collect::<Vec<_>>()
        .join("; ");
    let template = SUMMARY_TEMPLATES[rng.gen_range(0..SUMMARY_TEMPLATES.len())];
    collapse_whitespace(&template.replace("{facts}", &facts).replace("{answer}", hop.answer.trim()))
}

pub fn build_sft_record(d: &Decomposition, seed: u64, instruction: &str) -> Result<SftRecord, PairsError> {
    if d.hops.is_empty() {
        return Err(PairsError::NoHops(d.id.clone()));
    }
    let mut rng = record_rng(seed, &d.id);
    let mut parts = Vec::new();
    for (i, hop) in d.hops.iter().enumerate() {
        let bad = |reason: &str| PairsError::InvalidHop {
            id: d.id.clone(),
            hop: i + 1,
            reason: reason.into(),
        };
        if hop.paragraphs.is_empty() {
            return Err(bad("no golden paragraph"));
        }
        if hop.triplets.is_empty() {
            return Err(bad("no supporting triplet"));
        }
        if hop.subquery.trim().is_empty() {
            return Err(bad("empty subquery"));
        }
        let entities = hop_entities(hop);
        let context = simulate_context(hop, &mut rng);
        let summary = summarize(hop, &mut rng);
        parts.push(render_step(&entities, &collapse_whitespace(&hop.subquery), &context, &summary));
    }
    parts.push(render_answer(&collapse_whitespace(&d.answer)));
    let transcript = parts.join("\n");
    Ok(SftRecord {
        id: d.id.clone(),
        instruction: instruction.replace("{question}", &d.question),
        question: d.question.clone(),
        mask_spans: compute_mask_spans(&transcript)?,
        transcript,
    })
}
