use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::endpoint::{EndpointConfig, JsonClient};
use crate::text::lexical_tokens;

/// Scores `candidates` against `query`. Scores are logit-scale and unbounded;
/// the result is aligned to `candidates`. Argument order matters: callers
/// pass (query or evidence, candidate texts).
pub trait Scorer: Send + Sync {
    fn score(&self, query: &str, candidates: &[&str], top_k: usize) -> Result<Vec<f64>, RetrievalError>;
}

pub const LOGIT_CLAMP: f64 = 10.0;

/// Log-odds of token-set Jaccard overlap, clamped to ±[`LOGIT_CLAMP`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalReranker;

impl LexicalReranker {
    pub fn jaccard(a: &str, b: &str) -> f64 {
        let sa: HashSet<String> = lexical_tokens(a).into_iter().collect();
        let sb: HashSet<String> = lexical_tokens(b).into_iter().collect();
        let union = sa.union(&sb).count();
        if union == 0 {
            return 0.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    }

    pub fn logit(a: &str, b: &str) -> f64 {
        let j = Self::jaccard(a, b);
        if j <= 0.0 {
            -LOGIT_CLAMP
        } else if j >= 1.0 {
            LOGIT_CLAMP
        } else {
            (j / (1.0 - j)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        }
    }
}

impl Scorer for LexicalReranker {
    fn score(&self, query: &str, candidates: &[&str], _top_k: usize) -> Result<Vec<f64>, RetrievalError> {
        Ok(candidates.iter().map(|c| Self::logit(query, c)).collect())
    }
}

/// Keeps the incoming order: every candidate scores 0. Reranking with it is a
/// stable no-op on order.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, _query: &str, candidates: &[&str], _top_k: usize) -> Result<Vec<f64>, RetrievalError> {
        Ok(vec![self.0; candidates.len()])
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    candidates: &'a [&'a str],
    top_k: usize,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Retriever/reranker service: `{query, candidates, top_k}` → `{scores}`.
#[derive(Debug, Clone)]
pub struct EndpointScorer {
    client: JsonClient,
}

impl EndpointScorer {
    pub fn new(cfg: EndpointConfig) -> Result<Self, RetrievalError> {
        Ok(Self {
            client: JsonClient::new(cfg)?,
        })
    }
}

impl Scorer for EndpointScorer {
    fn score(&self, query: &str, candidates: &[&str], top_k: usize) -> Result<Vec<f64>, RetrievalError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let resp: ScoreResponse = self.client.post(&ScoreRequest { query, candidates, top_k })?;
        check_scores(&resp.scores, candidates.len())?;
        Ok(resp.scores)
    }
}

pub(crate) fn check_scores(scores: &[f64], expected: usize) -> Result<(), RetrievalError> {
    if scores.len() != expected {
        return Err(RetrievalError::ScoreCount {
            expected,
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RetrievalError::NonFiniteScore(i));
    }
    Ok(())
}
