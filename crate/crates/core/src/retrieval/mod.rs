//! Chunk retrieval, two-stage entity → triplet graph retrieval, and reranking.
//!
//! Scores are carried as raw, logit-scale values; nothing here applies a
//! sigmoid.

mod bm25;
mod scorers;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::Bm25Index;
pub use scorers::{ConstantScorer, EndpointScorer, LexicalReranker, Scorer, LOGIT_CLAMP};

use crate::corpus::{ChunkCorpus, KnowledgeGraphIndex, TripletId};
use crate::endpoint::EndpointError;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("retrieval endpoint failed after {attempts} attempt(s): {source}", attempts = .source.attempts())]
    Endpoint {
        #[from]
        source: EndpointError,
    },
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("scorer returned a non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitKind {
    Chunk,
    Triplet,
    Entity,
}

impl fmt::Display for HitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HitKind::Chunk => "chunk",
            HitKind::Triplet => "triplet",
            HitKind::Entity => "entity",
        })
    }
}

/// `item_id` is a chunk id, a triplet id (`t<n>`), or a stored entity string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub item_id: String,
    pub kind: HitKind,
    pub raw_score: f64,
}

impl ScoredHit {
    pub fn new(item_id: impl Into<String>, kind: HitKind, raw_score: f64) -> Self {
        Self {
            item_id: item_id.into(),
            kind,
            raw_score,
        }
    }

    pub fn triplet_id(&self) -> Option<TripletId> {
        (self.kind == HitKind::Triplet).then(|| self.item_id.parse().ok()).flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub chunk_fetch: usize,
    /// k_d
    pub chunk_keep: usize,
    pub entity_fetch: usize,
    pub entity_keep: usize,
    pub edge_fetch: usize,
    /// k_t
    pub edge_keep: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            chunk_fetch: 20,
            chunk_keep: 5,
            entity_fetch: 10,
            entity_keep: 5,
            edge_fetch: 20,
            edge_keep: 10,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let pairs = [
            ("chunk", self.chunk_fetch, self.chunk_keep),
            ("entity", self.entity_fetch, self.entity_keep),
            ("edge", self.edge_fetch, self.edge_keep),
        ];
        for (name, fetch, keep) in pairs {
            if fetch == 0 || keep == 0 {
                return Err(RetrievalError::InvalidConfig(format!("{name} fetch/keep must be positive")));
            }
            if keep > fetch {
                return Err(RetrievalError::InvalidConfig(format!(
                    "{name}_keep {keep} exceeds {name}_fetch {fetch}"
                )));
            }
        }
        Ok(())
    }
}

/// Indices of the `n` best scores, descending; ties keep input order.
pub fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(n);
    idx
}

/// Re-scores `hits` (paired with their text) and keeps the top `keep`.
/// Ties preserve the incoming order.
pub fn rerank(
    reranker: &dyn Scorer,
    query: &str,
    hits: Vec<(ScoredHit, &str)>,
    keep: usize,
) -> Result<Vec<ScoredHit>, RetrievalError> {
    if keep == 0 || hits.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = hits.iter().map(|(_, t)| *t).collect();
    let scores = reranker.score(query, &texts, keep)?;
    scorers::check_scores(&scores, texts.len())?;
    let order = top_indices(&scores, keep);
    let mut hits: Vec<Option<ScoredHit>> = hits.into_iter().map(|(h, _)| Some(h)).collect();
    Ok(order
        .into_iter()
        .map(|i| {
            let mut h = hits[i].take().expect("index used once");
            h.raw_score = scores[i];
            h
        })
        .collect())
}

/// First-stage candidate scorer.
pub enum FirstStage {
    /// BM25 (k1 = 1.2, b = 0.75), prebuilt for chunks and entities, built per
    /// call over the one-hop triplet pool.
    Bm25,
    Endpoint(Box<dyn Scorer>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRetrieval {
    /// 𝒱_q: union of per-query entity results, first-seen order.
    pub entities: Vec<String>,
    pub triplets: Vec<ScoredHit>,
}

/// Retrieval over one immutable corpus + knowledge graph. `Sync`, so one
/// instance may serve concurrent reasoning paths.
pub struct Retriever<'a> {
    corpus: &'a ChunkCorpus,
    kg: &'a KnowledgeGraphIndex,
    chunk_index: Bm25Index,
    entity_index: Bm25Index,
    first_stage: FirstStage,
    reranker: Box<dyn Scorer>,
    cfg: RetrievalConfig,
}

impl<'a> Retriever<'a> {
    /// Local deterministic backends: BM25 first stage, Jaccard log-odds reranker.
    pub fn local(
        corpus: &'a ChunkCorpus,
        kg: &'a KnowledgeGraphIndex,
        cfg: RetrievalConfig,
    ) -> Result<Self, RetrievalError> {
        Self::new(corpus, kg, cfg, FirstStage::Bm25, Box::new(LexicalReranker))
    }

    pub fn new(
        corpus: &'a ChunkCorpus,
        kg: &'a KnowledgeGraphIndex,
        cfg: RetrievalConfig,
        first_stage: FirstStage,
        reranker: Box<dyn Scorer>,
    ) -> Result<Self, RetrievalError> {
        cfg.validate()?;
        let (chunk_index, entity_index) = match first_stage {
            FirstStage::Bm25 => (
                Bm25Index::build(corpus.chunks().iter().map(|c| c.text.as_str())),
                Bm25Index::build(kg.entities().iter().map(String::as_str)),
            ),
            FirstStage::Endpoint(_) => Default::default(),
        };
        Ok(Self {
            corpus,
            kg,
            chunk_index,
            entity_index,
            first_stage,
            reranker,
            cfg,
        })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &'a ChunkCorpus {
        self.corpus
    }

    pub fn kg(&self) -> &'a KnowledgeGraphIndex {
        self.kg
    }

    pub fn reranker(&self) -> &dyn Scorer {
        self.reranker.as_ref()
    }

    fn first_stage_scores(
        &self,
        query: &str,
        prebuilt: Option<&Bm25Index>,
        texts: &[&str],
        fetch: usize,
    ) -> Result<Vec<f64>, RetrievalError> {
        match (&self.first_stage, prebuilt) {
            (FirstStage::Bm25, Some(idx)) => Ok(idx.scores(query)),
            (FirstStage::Bm25, None) => Ok(Bm25Index::build(texts.iter().copied()).scores(query)),
            (FirstStage::Endpoint(s), _) => {
                let scores = s.score(query, texts, fetch)?;
                scorers::check_scores(&scores, texts.len())?;
                Ok(scores)
            }
        }
    }

    /// 𝒟_q: top `chunk_fetch` by the first stage, reranked to `chunk_keep`.
    pub fn semantic_retrieve(&self, query: &str) -> Result<Vec<ScoredHit>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if self.corpus.is_empty() {
            return Ok(Vec::new());
        }
        let chunks = self.corpus.chunks();
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let scores = self.first_stage_scores(query, Some(&self.chunk_index), &texts, self.cfg.chunk_fetch)?;
        let candidates = top_indices(&scores, self.cfg.chunk_fetch)
            .into_iter()
            .map(|i| (ScoredHit::new(&chunks[i].id, HitKind::Chunk, scores[i]), texts[i]))
            .collect();
        rerank(self.reranker.as_ref(), query, candidates, self.cfg.chunk_keep)
    }

    /// Entity query string for one key entity.
    pub fn entity_query(entity: &str, subquery: &str) -> String {
        format!("Key entity: {entity}. Query: {subquery}.")
    }

    /// 𝒱_q. With no usable key entity, a single query with the bare subquery.
    pub fn retrieve_entities(&self, key_entities: &[String], subquery: &str) -> Result<Vec<String>, RetrievalError> {
        if subquery.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let ents = self.kg.entities();
        if ents.is_empty() {
            return Ok(Vec::new());
        }
        let keys: Vec<&String> = key_entities.iter().filter(|e| !e.trim().is_empty()).collect();
        let queries: Vec<String> = if keys.is_empty() {
            vec![subquery.to_string()]
        } else {
            keys.iter().map(|e| Self::entity_query(e, subquery)).collect()
        };
        let texts: Vec<&str> = ents.iter().map(String::as_str).collect();
        let mut union: Vec<String> = Vec::new();
        for q in &queries {
            let scores = self.first_stage_scores(q, Some(&self.entity_index), &texts, self.cfg.entity_fetch)?;
            let candidates = top_indices(&scores, self.cfg.entity_fetch)
                .into_iter()
                .map(|i| (ScoredHit::new(&ents[i], HitKind::Entity, scores[i]), texts[i]))
                .collect();
            for hit in rerank(self.reranker.as_ref(), q, candidates, self.cfg.entity_keep)? {
                if !union.contains(&hit.item_id) {
                    union.push(hit.item_id);
                }
            }
        }
        Ok(union)
    }

    /// Stage 1: [`Self::retrieve_entities`]; stage 2: score the subquery over
    /// the one-hop triplets of those entities, fetch `edge_fetch`, rerank to
    /// `edge_keep`.
    pub fn graph_retrieve(&self, key_entities: &[String], subquery: &str) -> Result<GraphRetrieval, RetrievalError> {
        let entities = self.retrieve_entities(key_entities, subquery)?;
        let pool = self.kg.one_hop_triplets(entities.iter().map(String::as_str));
        if pool.is_empty() {
            return Ok(GraphRetrieval {
                entities,
                triplets: Vec::new(),
            });
        }
        let rendered: Vec<String> = pool
            .iter()
            .map(|&id| self.kg.triplet(id).expect("pool ids resolve").render())
            .collect();
        let texts: Vec<&str> = rendered.iter().map(String::as_str).collect();
        let scores = self.first_stage_scores(subquery, None, &texts, self.cfg.edge_fetch)?;
        let candidates = top_indices(&scores, self.cfg.edge_fetch)
            .into_iter()
            .map(|i| (ScoredHit::new(pool[i].to_string(), HitKind::Triplet, scores[i]), texts[i]))
            .collect();
        let triplets = rerank(self.reranker.as_ref(), subquery, candidates, self.cfg.edge_keep)?;
        Ok(GraphRetrieval { entities, triplets })
    }

    /// Chunk text, stored entity, or rendered triplet behind a hit.
    pub fn hit_text(&self, hit: &ScoredHit) -> Option<String> {
        match hit.kind {
            HitKind::Chunk => self.corpus.get(&hit.item_id).map(|c| c.text.clone()),
            HitKind::Entity => self.kg.canonical_entity(&hit.item_id).map(str::to_string),
            HitKind::Triplet => hit.triplet_id().and_then(|id| self.kg.triplet(id)).map(|t| t.render()),
        }
    }
}
