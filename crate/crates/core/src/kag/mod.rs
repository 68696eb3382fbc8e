//! Knowledge association graph (KAG) over one reasoning step's retrieval
//! results, Personalized PageRank over it, and final context selection.
//!
//! Node kinds: the step's subquery (exactly one), retrieved chunks, retrieved
//! triplets, and entities (key entities, chunk titles, triplet heads/tails).
//! Edges are undirected:
//!
//! | rule | edge                         | weight                      |
//! |------|------------------------------|-----------------------------|
//! | 1    | head entity – tail entity    | 1                           |
//! | 2    | triplet – head, triplet – tail | 1                         |
//! | 3    | chunk – triplet (triplet sourced from that chunk) | 1      |
//! | 4    | chunk – head/tail of a co-occurring triplet; chunk – title | 1 |
//! | 5    | chunk – subquery             | σ(score)                    |
//! | 6    | triplet – subquery           | max(σ(score) − τ, 0)        |
//!
//! Zero-weight relevance edges are dropped; a repeated pair keeps the larger
//! weight.

mod dot;
mod ppr;
mod select;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dot::to_dot;
pub use ppr::{personalization, ppr, ppr_observed};
pub use select::{render_chunk, render_triplet, select_context, ContextItem};

use crate::corpus::{ChunkCorpus, KnowledgeGraphIndex};
use crate::retrieval::ScoredHit;
use crate::text::{entity_key, sigmoid};

#[derive(Debug, Error, PartialEq)]
pub enum KagError {
    #[error("graph has no subquery node")]
    MissingSubquery,
    #[error("graph has {0} subquery nodes")]
    MultipleSubquery(usize),
    #[error("importance vector has {got} entries for {expected} nodes")]
    Misaligned { expected: usize, got: usize },
    #[error("invalid ppr config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Subquery,
    Chunk,
    Triplet,
    Entity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KagNode {
    /// Unique within the graph: `q`, `chunk:<id>`, `triplet:t<n>`, `entity:<normalized>`.
    pub key: String,
    pub kind: NodeKind,
    /// Subquery text, chunk id, triplet id, or entity display string.
    pub payload_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Cooccurrence,
    Relevance,
}

/// Undirected; stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KagEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Kag {
    pub nodes: Vec<KagNode>,
    pub edges: Vec<KagEdge>,
    pub key_entity_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PprConfig {
    pub alpha: f64,
    /// N
    pub iterations: usize,
    pub tau: f64,
    pub k_f: usize,
    /// Stop early once the max-abs change between iterates drops below this.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            iterations: 200,
            tau: 0.2,
            k_f: 5,
            epsilon: None,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<(), KagError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(KagError::InvalidConfig(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.iterations == 0 || self.k_f == 0 {
            return Err(KagError::InvalidConfig("iterations and k_f must be positive".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(KagError::InvalidConfig(format!("tau {} must be >= 0", self.tau)));
        }
        if matches!(self.epsilon, Some(e) if !(e > 0.0)) {
            return Err(KagError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

impl Kag {
    pub fn subquery_node(&self) -> Result<usize, KagError> {
        let mut it = self.nodes.iter().enumerate().filter(|(_, n)| n.kind == NodeKind::Subquery);
        let first = it.next().ok_or(KagError::MissingSubquery)?.0;
        let extra = it.count();
        if extra > 0 {
            return Err(KagError::MultipleSubquery(extra + 1));
        }
        Ok(first)
    }

    pub fn node_index(&self, key: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.key == key)
    }

    /// Weight of the relevance edge between `node` and the subquery (0 if none).
    pub fn relevance_weight(&self, node: usize) -> f64 {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Relevance && (e.a == node || e.b == node))
            .map(|e| e.weight)
            .fold(0.0, f64::max)
    }

    pub fn edge(&self, u: usize, v: usize) -> Option<&KagEdge> {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        self.edges.iter().find(|e| e.a == a && e.b == b)
    }
}

pub fn chunk_key(id: &str) -> String {
    format!("chunk:{id}")
}

pub fn triplet_key(id: &str) -> String {
    format!("triplet:{id}")
}

pub fn entity_node_key(name: &str) -> String {
    format!("entity:{}", entity_key(name))
}

#[derive(Default)]
struct GraphBuilder {
    nodes: Vec<KagNode>,
    index: HashMap<String, usize>,
    edges: BTreeMap<(usize, usize), (EdgeKind, f64)>,
}

impl GraphBuilder {
    fn node(&mut self, key: String, kind: NodeKind, payload: &str) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.nodes.len();
        self.index.insert(key.clone(), i);
        self.nodes.push(KagNode {
            key,
            kind,
            payload_ref: payload.to_string(),
        });
        i
    }

    fn entity(&mut self, name: &str) -> Option<usize> {
        if entity_key(name).is_empty() {
            return None;
        }
        Some(self.node(entity_node_key(name), NodeKind::Entity, name.trim()))
    }

    fn edge(&mut self, u: usize, v: usize, kind: EdgeKind, weight: f64) {
        if u == v || !(weight > 0.0) {
            return;
        }
        let key = if u < v { (u, v) } else { (v, u) };
        match self.edges.get_mut(&key) {
            Some(slot) if slot.1 >= weight => {}
            Some(slot) => *slot = (kind, weight),
            None => {
                self.edges.insert(key, (kind, weight));
            }
        }
    }
}

/// Builds the step's KAG. Hits that do not resolve in the stores are skipped;
/// duplicate hits keep the first occurrence's score.
pub fn build_kag(
    subquery: &str,
    key_entities: &[String],
    chunks: &[ScoredHit],
    triplets: &[ScoredHit],
    corpus: &ChunkCorpus,
    kg: &KnowledgeGraphIndex,
    cfg: &PprConfig,
) -> Kag {
    let mut g = GraphBuilder::default();
    let q = g.node("q".into(), NodeKind::Subquery, subquery);

    let mut chunk_nodes: Vec<(usize, &str, f64)> = Vec::new();
    for hit in chunks {
        if corpus.get(&hit.item_id).is_none() || g.index.contains_key(&chunk_key(&hit.item_id)) {
            continue;
        }
        let n = g.node(chunk_key(&hit.item_id), NodeKind::Chunk, &hit.item_id);
        chunk_nodes.push((n, hit.item_id.as_str(), hit.raw_score));
    }
    let mut triplet_nodes = Vec::new();
    for hit in triplets {
        let Some(t) = hit.triplet_id().and_then(|id| kg.triplet(id)) else {
            continue;
        };
        if g.index.contains_key(&triplet_key(&hit.item_id)) {
            continue;
        }
        let n = g.node(triplet_key(&hit.item_id), NodeKind::Triplet, &hit.item_id);
        triplet_nodes.push((n, t, hit.raw_score));
    }

    let mut key_ids = Vec::new();
    for e in key_entities {
        if let Some(n) = g.entity(e) {
            if !key_ids.contains(&n) {
                key_ids.push(n);
            }
        }
    }

    for &(n, id, score) in &chunk_nodes {
        let title = &corpus.get(id).expect("resolved above").title;
        if let Some(t) = g.entity(title) {
            g.edge(n, t, EdgeKind::Cooccurrence, 1.0);
        }
        g.edge(n, q, EdgeKind::Relevance, sigmoid(score));
    }

    let chunk_of: HashMap<&str, usize> = chunk_nodes.iter().map(|&(n, id, _)| (id, n)).collect();
    for &(n, t, score) in &triplet_nodes {
        let h = g.entity(&t.head).expect("non-empty head");
        let tl = g.entity(&t.tail).expect("non-empty tail");
        g.edge(h, tl, EdgeKind::Cooccurrence, 1.0);
        g.edge(n, h, EdgeKind::Cooccurrence, 1.0);
        g.edge(n, tl, EdgeKind::Cooccurrence, 1.0);
        if let Some(&c) = t.source_chunk_id.as_deref().and_then(|s| chunk_of.get(s)) {
            g.edge(c, n, EdgeKind::Cooccurrence, 1.0);
            g.edge(c, h, EdgeKind::Cooccurrence, 1.0);
            g.edge(c, tl, EdgeKind::Cooccurrence, 1.0);
        }
        g.edge(n, q, EdgeKind::Relevance, (sigmoid(score) - cfg.tau).max(0.0));
    }

    Kag {
        nodes: g.nodes,
        edges: g
            .edges
            .into_iter()
            .map(|((a, b), (kind, weight))| KagEdge { a, b, kind, weight })
            .collect(),
        key_entity_ids: key_ids,
    }
}
