use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ChunkCorpus, CorpusError};
use crate::text::entity_key;

/// Index of a triplet inside its [`KnowledgeGraphIndex`]. Rendered as `t<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletId(pub u32);

impl fmt::Display for TripletId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl FromStr for TripletId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('t')
            .and_then(|n| n.parse().ok())
            .map(TripletId)
            .ok_or_else(|| format!("not a triplet id: {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default)]
    pub source_chunk_id: Option<String>,
}

impl Triplet {
    pub fn new(head: &str, relation: &str, tail: &str, source: Option<&str>) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
            source_chunk_id: source.map(str::to_string),
        }
    }

    /// `head relation tail`, single-space joined.
    pub fn render(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }

    fn dedup_key(&self) -> (String, String, String, Option<String>) {
        (
            entity_key(&self.head),
            entity_key(&self.relation),
            entity_key(&self.tail),
            self.source_chunk_id.clone(),
        )
    }
}

/// Entities, triplets, and the entity → triplet and chunk → triplet indexes.
/// Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraphIndex {
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    triplets: Vec<Triplet>,
    adjacency: Vec<Vec<TripletId>>,
    by_chunk: BTreeMap<String, Vec<TripletId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entity_count: usize,
    pub triplet_count: usize,
    pub avg_out_degree_per_head: f64,
    pub avg_in_degree_per_tail: f64,
    pub avg_degree_per_entity: f64,
}

impl KnowledgeGraphIndex {
    /// Builds the index, dropping exact duplicates of
    /// (head, relation, tail, source chunk) under entity normalization.
    /// When `corpus` is given, every source chunk id must resolve in it.
    pub fn from_triplets(
        triplets: impl IntoIterator<Item = Triplet>,
        corpus: Option<&ChunkCorpus>,
    ) -> Result<Self, CorpusError> {
        let mut builder = KgBuilder::default();
        for t in triplets {
            builder.add(t, corpus)?;
        }
        Ok(builder.build())
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn triplet(&self, id: TripletId) -> Option<&Triplet> {
        self.triplets.get(id.0 as usize)
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Resolves an entity string (case/whitespace-insensitive) to its index.
    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(&entity_key(name)).copied()
    }

    /// Stored (original-casing) form of an entity.
    pub fn canonical_entity(&self, name: &str) -> Option<&str> {
        self.entity_id(name).map(|i| self.entities[i].as_str())
    }

    /// Triplets incident to an entity, ascending by id.
    pub fn incident(&self, entity: usize) -> &[TripletId] {
        &self.adjacency[entity]
    }

    pub fn adjacency(&self) -> &[Vec<TripletId>] {
        &self.adjacency
    }

    pub fn by_chunk(&self) -> &BTreeMap<String, Vec<TripletId>> {
        &self.by_chunk
    }

    pub fn triplets_from_chunk(&self, chunk_id: &str) -> &[TripletId] {
        self.by_chunk.get(chunk_id).map_or(&[], Vec::as_slice)
    }

    /// All triplets whose head or tail is in `entities`, deduplicated and
    /// ascending. Unknown entities contribute nothing.
    pub fn one_hop_triplets<'a>(&self, entities: impl IntoIterator<Item = &'a str>) -> Vec<TripletId> {
        let mut out = BTreeSet::new();
        for e in entities {
            if let Some(i) = self.entity_id(e) {
                out.extend(self.adjacency[i].iter().copied());
            }
        }
        out.into_iter().collect()
    }

    pub fn stats(&self) -> GraphStats {
        let n_trip = self.triplets.len();
        if n_trip == 0 {
            return GraphStats {
                entity_count: self.entities.len(),
                triplet_count: 0,
                avg_out_degree_per_head: 0.0,
                avg_in_degree_per_tail: 0.0,
                avg_degree_per_entity: 0.0,
            };
        }
        let heads: HashSet<String> = self.triplets.iter().map(|t| entity_key(&t.head)).collect();
        let tails: HashSet<String> = self.triplets.iter().map(|t| entity_key(&t.tail)).collect();
        let degree_sum: usize = self.degrees().iter().sum();
        GraphStats {
            entity_count: self.entities.len(),
            triplet_count: n_trip,
            avg_out_degree_per_head: n_trip as f64 / heads.len() as f64,
            avg_in_degree_per_tail: n_trip as f64 / tails.len() as f64,
            avg_degree_per_entity: degree_sum as f64 / self.entities.len() as f64,
        }
    }

    /// Per-entity degree counting every head and tail occurrence (a
    /// self-referencing triplet contributes 2).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.entities.len()];
        for t in &self.triplets {
            deg[self.entity_ids[&entity_key(&t.head)]] += 1;
            deg[self.entity_ids[&entity_key(&t.tail)]] += 1;
        }
        deg
    }

    /// Rebuilds the adjacency lists from the triplet list.
    pub fn rebuild_adjacency(&self) -> Vec<Vec<TripletId>> {
        build_adjacency(&self.entity_ids, self.entities.len(), &self.triplets)
    }

    pub(crate) fn replace_adjacency(&mut self, adjacency: Vec<Vec<TripletId>>) {
        self.adjacency = adjacency;
    }
}

fn build_adjacency(
    ids: &HashMap<String, usize>,
    n: usize,
    triplets: &[Triplet],
) -> Vec<Vec<TripletId>> {
    let mut adj = vec![Vec::new(); n];
    for (i, t) in triplets.iter().enumerate() {
        let id = TripletId(i as u32);
        let h = ids[&entity_key(&t.head)];
        let tl = ids[&entity_key(&t.tail)];
        adj[h].push(id);
        if tl != h {
            adj[tl].push(id);
        }
    }
    adj
}

/// Single-writer incremental construction of a [`KnowledgeGraphIndex`].
#[derive(Debug, Default)]
pub struct KgBuilder {
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    triplets: Vec<Triplet>,
    seen: HashSet<(String, String, String, Option<String>)>,
}

impl KgBuilder {
    /// Adds a triplet; returns `Ok(None)` for a duplicate.
    pub fn add(
        &mut self,
        t: Triplet,
        corpus: Option<&ChunkCorpus>,
    ) -> Result<Option<TripletId>, CorpusError> {
        if t.head.trim().is_empty() || t.relation.trim().is_empty() || t.tail.trim().is_empty() {
            return Err(CorpusError::InvalidTriplet(format!(
                "empty field in ({:?}, {:?}, {:?})",
                t.head, t.relation, t.tail
            )));
        }
        if let (Some(src), Some(c)) = (&t.source_chunk_id, corpus) {
            if !c.contains(src) {
                return Err(CorpusError::UnknownSourceChunk(src.clone()));
            }
        }
        if !self.seen.insert(t.dedup_key()) {
            return Ok(None);
        }
        self.intern(&t.head);
        self.intern(&t.tail);
        let id = TripletId(self.triplets.len() as u32);
        self.triplets.push(t);
        Ok(Some(id))
    }

    fn intern(&mut self, name: &str) {
        let key = entity_key(name);
        if !self.entity_ids.contains_key(&key) {
            self.entity_ids.insert(key, self.entities.len());
            self.entities.push(name.trim().to_string());
        }
    }

    pub fn build(self) -> KnowledgeGraphIndex {
        let adjacency = build_adjacency(&self.entity_ids, self.entities.len(), &self.triplets);
        let mut by_chunk: BTreeMap<String, Vec<TripletId>> = BTreeMap::new();
        for (i, t) in self.triplets.iter().enumerate() {
            if let Some(src) = &t.source_chunk_id {
                by_chunk.entry(src.clone()).or_default().push(TripletId(i as u32));
            }
        }
        KnowledgeGraphIndex {
            entities: self.entities,
            entity_ids: self.entity_ids,
            triplets: self.triplets,
            adjacency,
            by_chunk,
        }
    }
}
