//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails. Oracles here are written from the
//! definitions and share no code with the library paths they check.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kagrag::agent::{Agent, AgentConfig, PathRecord, ReasoningPath, ReasoningStep, StepTrace, Termination};
use kagrag::corpus::store::read_triplets;
use kagrag::corpus::{
    build_knowledge_graph, ingest_chunks, ChunkCorpus, ChunkRecord, KnowledgeGraphIndex, RuleExtractor, Triplet,
};
use kagrag::generate::ScriptedGenerator;
use kagrag::kag::{
    build_kag, ppr, ppr_observed, render_chunk, render_triplet, to_dot, ContextItem, EdgeKind, Kag, KagEdge, KagNode,
    NodeKind, PprConfig,
};
use kagrag::metrics::{account_text, TokenAccount};
use kagrag::pairs::{
    build_pairs, build_sft_record, compute_mask_spans, score_samples, Decomposition, DecompositionHop, RejectionKind,
    SampleRecord, SupportTriplet,
};
use kagrag::retrieval::{ConstantScorer, HitKind, LexicalReranker, Retriever, ScoredHit, Scorer};
use kagrag::rewards::{
    aggregate_process, consistency_reward, memory_vectors, outcome_reward, score_path, GoldenEvidence, HopKind,
    QaRecord, RewardBreakdown,
};
use kagrag::text::{Tokenizer, WhitespaceTokenizer};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

// ---------------------------------------------------------------------------
// shared oracle pieces

fn oracle_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn oracle_key(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// 1. PPR oracle equivalence

fn random_kag(rng: &mut ChaCha8Rng) -> Kag {
    let n = rng.gen_range(1..=50);
    let density: f64 = rng.gen_range(0.0..0.3);
    let mut nodes = vec![KagNode { key: "q".into(), kind: NodeKind::Subquery, payload_ref: "q".into() }];
    for i in 1..n {
        let kind = [NodeKind::Chunk, NodeKind::Triplet, NodeKind::Entity][rng.gen_range(0..3)];
        nodes.push(KagNode { key: format!("n{i}"), kind, payload_ref: format!("n{i}") });
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(density) {
                let co = rng.gen_bool(0.5);
                edges.push(KagEdge {
                    a,
                    b,
                    kind: if co { EdgeKind::Cooccurrence } else { EdgeKind::Relevance },
                    weight: if co { 1.0 } else { rng.gen_range(1e-3..1.0) },
                });
            }
        }
    }
    let key_entity_ids = (1..n).filter(|&i| nodes[i].kind == NodeKind::Entity && rng.gen_bool(0.2)).collect();
    Kag { nodes, edges, key_entity_ids }
}

fn dense_power_iteration(g: &Kag, alpha: f64, iters: usize) -> Vec<f64> {
    let n = g.nodes.len();
    let mut w = vec![vec![0.0f64; n]; n];
    for e in &g.edges {
        w[e.a][e.b] += e.weight;
        w[e.b][e.a] += e.weight;
    }
    for j in 0..n {
        let s: f64 = (0..n).map(|i| w[i][j]).sum();
        if s > 0.0 {
            for row in w.iter_mut() {
                row[j] /= s;
            }
        } else {
            w[j][j] = 1.0;
        }
    }
    let mut p = vec![0.0; n];
    for (i, node) in g.nodes.iter().enumerate() {
        if node.kind == NodeKind::Subquery {
            p[i] = 1.0;
        }
    }
    for &k in &g.key_entity_ids {
        p[k] = 0.5;
    }
    let z: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= z;
    }
    let mut pi = p.clone();
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[i][j] * pi[j];
            }
            next[i] = alpha * acc + (1.0 - alpha) * p[i];
        }
        pi = next;
    }
    pi
}

fn ppr_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let cfg = PprConfig::default();
    let graphs: Vec<Kag> = (0..200).map(|_| random_kag(&mut rng)).collect();
    let mut sparse_time = Duration::ZERO;
    let mut worst_entry = 0.0f64;
    let mut worst_sum = 0.0f64;
    for g in &graphs {
        let t = Instant::now();
        let pi = ppr_observed(g, &cfg, |_, v| {
            worst_sum = worst_sum.max((v.iter().sum::<f64>() - 1.0).abs());
        })
        .map_err(|e| e.to_string())?;
        sparse_time += t.elapsed();
        let dense = dense_power_iteration(g, cfg.alpha, cfg.iterations);
        for (a, b) in pi.iter().zip(&dense) {
            worst_entry = worst_entry.max((a - b).abs());
        }
    }
    ensure!(worst_entry <= 1e-9, "max |sparse - dense| = {worst_entry:e} > 1e-9");
    ensure!(worst_sum <= 1e-9, "max |sum(pi) - 1| = {worst_sum:e} > 1e-9");
    ensure!(sparse_time < Duration::from_secs(10), "sparse ppr took {sparse_time:?}");
    Ok(format!(
        "200 graphs, max entry diff {worst_entry:.1e}, max mass drift {worst_sum:.1e}, sparse time {:.1} ms",
        sparse_time.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------------------
// 2. KAG edge rules

fn fixture_kg(rng: &mut ChaCha8Rng) -> (ChunkCorpus, KnowledgeGraphIndex) {
    let entities: Vec<String> = (0..20).map(|i| format!("Entity {i}")).collect();
    let records: Vec<ChunkRecord> = (0..15)
        .map(|i| ChunkRecord {
            id: format!("c{i}"),
            title: if i % 3 == 0 { format!("Topic {i}") } else { entities[(i * 7) % 20].clone() },
            text: format!("chunk {i} text about {}", entities[i % 20]),
        })
        .collect();
    let corpus = ChunkCorpus::from_records(records, &WhitespaceTokenizer).expect("fixture corpus");
    let relations = ["born in", "father", "works at", "near", "part of"];
    let mut triplets: Vec<Triplet> = Vec::new();
    let mut seen = HashSet::new();
    while triplets.len() < 50 {
        let h = &entities[rng.gen_range(0..20)];
        // occasional self-loop, occasional case variant
        let t = if rng.gen_bool(0.05) { h.to_uppercase() } else { entities[rng.gen_range(0..20)].clone() };
        let r = relations[rng.gen_range(0..relations.len())];
        let src = (!rng.gen_bool(0.1)).then(|| format!("c{}", rng.gen_range(0..15)));
        if seen.insert((oracle_key(h), r, oracle_key(&t), src.clone())) {
            triplets.push(Triplet::new(h, r, &t, src.as_deref()));
        }
    }
    let kg = KnowledgeGraphIndex::from_triplets(triplets, Some(&corpus)).expect("fixture kg");
    (corpus, kg)
}

type EdgeMap = BTreeMap<(String, String), f64>;

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Brute force over all node pairs, applying rules 1 to 6 directly.
fn interpret_rules(
    key_entities: &[String],
    chunks: &[ScoredHit],
    triplets: &[ScoredHit],
    corpus: &ChunkCorpus,
    kg: &KnowledgeGraphIndex,
    tau: f64,
) -> (HashSet<String>, EdgeMap) {
    struct CNode {
        key: String,
        id: String,
        title: String,
        score: f64,
    }
    struct TNode {
        key: String,
        head: String,
        tail: String,
        source: Option<String>,
        score: f64,
    }
    let mut cs: Vec<CNode> = Vec::new();
    for h in chunks {
        let key = format!("chunk:{}", h.item_id);
        if let Some(c) = corpus.chunks().iter().find(|c| c.id == h.item_id) {
            if !cs.iter().any(|x| x.key == key) {
                cs.push(CNode { key, id: c.id.clone(), title: c.title.clone(), score: h.raw_score });
            }
        }
    }
    let mut ts: Vec<TNode> = Vec::new();
    for h in triplets {
        let idx: Option<usize> = h.item_id.strip_prefix('t').and_then(|n| n.parse().ok());
        if let Some(t) = idx.and_then(|i| kg.triplets().get(i)) {
            let key = format!("triplet:{}", h.item_id);
            if !ts.iter().any(|x| x.key == key) {
                ts.push(TNode {
                    key,
                    head: oracle_key(&t.head),
                    tail: oracle_key(&t.tail),
                    source: t.source_chunk_id.clone(),
                    score: h.raw_score,
                });
            }
        }
    }
    let mut ents: Vec<String> = Vec::new();
    let mut add = |e: String| {
        if !e.is_empty() && !ents.contains(&e) {
            ents.push(e);
        }
    };
    key_entities.iter().for_each(|e| add(oracle_key(e)));
    cs.iter().for_each(|c| add(oracle_key(&c.title)));
    ts.iter().for_each(|t| {
        add(t.head.clone());
        add(t.tail.clone());
    });

    let mut nodes: HashSet<String> = HashSet::from(["q".to_string()]);
    nodes.extend(cs.iter().map(|c| c.key.clone()));
    nodes.extend(ts.iter().map(|t| t.key.clone()));
    nodes.extend(ents.iter().map(|e| format!("entity:{e}")));

    let mut edges = EdgeMap::new();
    let mut offer = |a: &str, b: &str, w: f64| {
        if a == b || w <= 0.0 {
            return;
        }
        let slot = edges.entry(pair(a, b)).or_insert(0.0);
        *slot = slot.max(w);
    };
    // entity-entity
    for e1 in &ents {
        for e2 in &ents {
            if ts.iter().any(|t| (t.head == *e1 && t.tail == *e2) || (t.head == *e2 && t.tail == *e1)) {
                offer(&format!("entity:{e1}"), &format!("entity:{e2}"), 1.0);
            }
        }
    }
    for t in &ts {
        for e in &ents {
            if t.head == *e || t.tail == *e {
                offer(&t.key, &format!("entity:{e}"), 1.0);
            }
        }
        offer(&t.key, "q", (oracle_sigmoid(t.score) - tau).max(0.0));
    }
    for c in &cs {
        for t in &ts {
            if t.source.as_deref() == Some(c.id.as_str()) {
                offer(&c.key, &t.key, 1.0);
            }
        }
        for e in &ents {
            let is_title = oracle_key(&c.title) == *e;
            let via_triplet = ts
                .iter()
                .any(|t| t.source.as_deref() == Some(c.id.as_str()) && (t.head == *e || t.tail == *e));
            if is_title || via_triplet {
                offer(&c.key, &format!("entity:{e}"), 1.0);
            }
        }
        offer(&c.key, "q", oracle_sigmoid(c.score));
    }
    (nodes, edges)
}

fn kag_edge_rules() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let (corpus, kg) = fixture_kg(&mut rng);
    let n_t = kg.triplets().len();
    ensure!(n_t == 50, "fixture kg has {n_t} triplets");
    let cfg = PprConfig::default();
    let mut total_edges = 0;
    for case in 0..100 {
        let mut chunks = Vec::new();
        for _ in 0..rng.gen_range(0..=8) {
            let id = if rng.gen_bool(0.05) { "c999".to_string() } else { format!("c{}", rng.gen_range(0..15)) };
            chunks.push(ScoredHit::new(id, HitKind::Chunk, rng.gen_range(-6.0..6.0)));
        }
        let mut triplets = Vec::new();
        for _ in 0..rng.gen_range(0..=12) {
            let id = if rng.gen_bool(0.05) { "t999".to_string() } else { format!("t{}", rng.gen_range(0..n_t)) };
            triplets.push(ScoredHit::new(id, HitKind::Triplet, rng.gen_range(-6.0..6.0)));
        }
        let key_entities: Vec<String> = (0..rng.gen_range(0..3))
            .map(|_| match rng.gen_range(0..4) {
                0 => "Nobody Known".to_string(),
                1 => format!("entity  {}", rng.gen_range(0..20)),
                _ => format!("Entity {}", rng.gen_range(0..20)),
            })
            .collect();
        let g = build_kag("subquery", &key_entities, &chunks, &triplets, &corpus, &kg, &cfg);
        let got_nodes: HashSet<String> = g.nodes.iter().map(|n| n.key.clone()).collect();
        let got_edges: EdgeMap = g
            .edges
            .iter()
            .map(|e| (pair(&g.nodes[e.a].key, &g.nodes[e.b].key), e.weight))
            .collect();
        ensure!(got_edges.len() == g.edges.len(), "case {case}: duplicate edge pairs");
        let (want_nodes, want_edges) = interpret_rules(&key_entities, &chunks, &triplets, &corpus, &kg, cfg.tau);
        ensure!(got_nodes == want_nodes, "case {case}: node sets differ");
        if got_edges != want_edges {
            let missing: Vec<_> = want_edges.iter().filter(|(k, v)| got_edges.get(*k) != Some(v)).take(3).collect();
            let extra: Vec<_> = got_edges.iter().filter(|(k, v)| want_edges.get(*k) != Some(v)).take(3).collect();
            return Err(format!("case {case}: edge sets differ; missing {missing:?} extra {extra:?}"));
        }
        for e in &g.edges {
            let kinds = (g.nodes[e.a].kind, g.nodes[e.b].kind);
            let relevance = matches!(kinds, (NodeKind::Subquery, _) | (_, NodeKind::Subquery));
            ensure!(
                (e.kind == EdgeKind::Relevance) == relevance,
                "case {case}: edge kind mismatch on {kinds:?}"
            );
        }
        total_edges += got_edges.len();
    }
    Ok(format!("100 outcomes over a {n_t}-triplet kg, {total_edges} edges matched exactly"))
}

// ---------------------------------------------------------------------------
// 3. Reward formulas

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut cleaned = String::new();
    for c in s.to_lowercase().chars() {
        cleaned.push(if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' });
    }
    cleaned
        .split_whitespace()
        .filter(|w| *w != "a" && *w != "an" && *w != "the")
        .map(String::from)
        .collect()
}

fn oracle_f1(a: &str, b: &str) -> f64 {
    let p = oracle_tokens(a);
    let mut g = oracle_tokens(b);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let (np, ng) = (p.len(), g.len());
    let mut common = 0;
    for t in &p {
        if let Some(i) = g.iter().position(|x| x == t) {
            g.remove(i);
            common += 1;
        }
    }
    2.0 * common as f64 / (np + ng) as f64
}

const VOCAB: [&str; 16] = [
    "a", "an", "The", "the", "Carl", "carl,", "Westphal", "died", "in", "Kreuzlingen.", "Berlin!", "father's", "x-y",
    "Ünïcode", "1890", "--",
];

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    (0..rng.gen_range(0..=max)).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

fn random_path(rng: &mut ChaCha8Rng) -> ReasoningPath {
    let k = rng.gen_range(0..5);
    let steps: Vec<ReasoningStep> = (1..=k)
        .map(|index| ReasoningStep {
            index,
            key_entities: (0..rng.gen_range(0..3)).map(|_| VOCAB[rng.gen_range(4..VOCAB.len())].to_string()).collect(),
            subquery: random_text(rng, 8),
            context: (0..rng.gen_range(0..4))
                .map(|i| ContextItem {
                    kind: HitKind::Chunk,
                    item_id: format!("c{i}"),
                    text: random_text(rng, 10),
                    score: 0.0,
                })
                .collect(),
            summary: random_text(rng, 8),
            violations: vec![],
            tokens: TokenAccount::default(),
            trace: StepTrace::default(),
        })
        .collect();
    let answer = rng.gen_bool(0.8).then(|| random_text(rng, 3));
    ReasoningPath {
        question: "q".into(),
        variant: 0,
        steps,
        final_answer: answer,
        terminated_by: Termination::Answer,
        transcript: String::new(),
        violations: vec![],
        error: None,
        tokens: TokenAccount::default(),
    }
}

fn reward_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    for i in 0..1000 {
        let (a, b) = (random_text(&mut rng, 6), random_text(&mut rng, 6));
        let (got, want) = (outcome_reward(&a, &b), oracle_f1(&a, &b));
        ensure!(got == want, "F1 pair {i} ({a:?}, {b:?}): {got} vs oracle {want}");
    }
    let scorer = LexicalReranker;
    let sim = |g: &str, c: &str| oracle_sigmoid(scorer.score(g, &[c], 1).unwrap()[0]);
    for i in 0..300 {
        let path = random_path(&mut rng);
        let k = path.steps.len();
        // CEM / consistency
        let mut cem_sum = 0.0;
        for s in &path.steps {
            let sq = oracle_key(&s.subquery);
            let mut ok = !s.key_entities.is_empty();
            for e in &s.key_entities {
                let e = oracle_key(e);
                ok &= !e.is_empty() && sq.contains(&e);
            }
            cem_sum += if ok { 1.0 } else { 0.0 };
        }
        let want_cons = if k == 0 { 0.0 } else { cem_sum / k as f64 };
        ensure!(consistency_reward(&path) == want_cons, "path {i}: consistency mismatch");

        // memory vectors, double loop
        let golden = GoldenEvidence::new((0..rng.gen_range(0..4)).map(|_| random_text(&mut rng, 6)).collect());
        let m = memory_vectors(&path, &golden, &scorer).map_err(|e| e.to_string())?;
        let mut want = (vec![], vec![], vec![]);
        for g in &golden.items {
            let (mut q, mut c, mut s) = (0.0f64, 0.0f64, 0.0f64);
            for st in &path.steps {
                q = q.max(sim(g, &st.subquery));
                s = s.max(sim(g, &st.summary));
                for item in &st.context {
                    c = c.max(sim(g, &item.text));
                }
            }
            want.0.push(q);
            want.1.push(c);
            want.2.push(s);
        }
        ensure!((m.m_q.clone(), m.m_c.clone(), m.m_s.clone()) == want, "path {i}: memory vectors differ");

        // aggregation
        let hop = if rng.gen_bool(0.25) { HopKind::Single } else { HopKind::Multi };
        let truths = vec![random_text(&mut rng, 3)];
        let b = score_path(&path, &truths, &golden, &scorer, hop).map_err(|e| e.to_string())?;
        let outcome = path.final_answer.as_deref().map_or(0.0, |a| oracle_f1(a, &truths[0]));
        match hop {
            HopKind::Single => {
                ensure!(b.r_process == 0.0, "path {i}: single-hop process {}", b.r_process);
                ensure!(b.r_outcome == outcome / k.max(1) as f64, "path {i}: single-hop scaling");
            }
            HopKind::Multi if k > 0 => {
                let norm = |v: &[f64]| (v.iter().sum::<f64>() / k as f64).min(1.0);
                let (rq, rc, rs) = (norm(&want.0), norm(&want.1), norm(&want.2));
                let rp = 0.1 * want_cons + 0.3 * rq + 0.3 * rc + 0.3 * rs;
                ensure!((b.r_q, b.r_c, b.r_s) == (rq, rc, rs), "path {i}: normalized memory differs");
                ensure!((b.r_process - rp).abs() <= 1e-12, "path {i}: process {} vs {rp}", b.r_process);
                let bound = golden.len() as f64 / k as f64;
                ensure!(b.r_q <= bound && b.r_c <= bound && b.r_s <= bound, "path {i}: l/k bound violated");
            }
            HopKind::Multi => ensure!(b.r_process == 0.0, "path {i}: k = 0 process"),
        }
        let all = [b.r_outcome, b.r_format, b.r_consistency, b.r_q, b.r_c, b.r_s, b.r_process, b.total];
        ensure!(
            all.iter().chain(&b.m_q).chain(&b.m_c).chain(&b.m_s).all(|v| (0.0..=1.0).contains(v)),
            "path {i}: component outside [0,1]: {b:?}"
        );
    }
    ensure!(aggregate_process(1.0, 1.0, 1.0, 1.0) == 1.0, "all-ones aggregation is not exactly 1");
    let mut p = random_path(&mut rng);
    p.final_answer = Some("x".into());
    p.steps = vec![ReasoningStep {
        index: 1,
        key_entities: vec!["x".into()],
        subquery: "x".into(),
        context: vec![ContextItem { kind: HitKind::Chunk, item_id: "c".into(), text: "x".into(), score: 0.0 }],
        summary: "x".into(),
        violations: vec![],
        tokens: TokenAccount::default(),
        trace: StepTrace::default(),
    }];
    let b = score_path(&p, &["x".into()], &GoldenEvidence::new(vec!["x".into()]), &ConstantScorer(1e9), HopKind::Multi)
        .map_err(|e| e.to_string())?;
    ensure!(b.r_process == 1.0, "saturated path has r_process {}", b.r_process);
    Ok("1000 F1 pairs, 300 random paths (CEM, memory, aggregation, ranges), all-ones = 1.0".into())
}

// ---------------------------------------------------------------------------
// 4. Pair construction, checked by an independent constraint checker

fn grid_or_uniform(rng: &mut ChaCha8Rng) -> f64 {
    const GRID: [f64; 9] = [0.0, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    if rng.gen_bool(0.6) {
        GRID[rng.gen_range(0..GRID.len())]
    } else {
        rng.gen_range(0.0..=1.0)
    }
}

fn pair_constraints() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut samples = Vec::new();
    for q in 0..600 {
        let single = rng.gen_bool(0.3);
        for path_id in 0..8 {
            let format = if rng.gen_bool(0.8) { 1.0 } else { 0.0 };
            let (outcome, process) = if single {
                let k = rng.gen_range(1..=3) as f64;
                ((if rng.gen_bool(0.5) { 1.0 } else { grid_or_uniform(&mut rng) }) / k, 0.0)
            } else {
                (grid_or_uniform(&mut rng), grid_or_uniform(&mut rng))
            };
            let transcript = format!(
                "Important entity: e\nSubquery: s\n<Reference>\nEvidence 1: q{q} p{path_id}\n</Reference>\nSummary: x\nFinal answer: a"
            );
            samples.push(SampleRecord {
                question_id: format!("q{q}"),
                hop_kind: if single { HopKind::Single } else { HopKind::Multi },
                path_id,
                path: ReasoningPath {
                    question: format!("question {q}"),
                    variant: path_id,
                    steps: vec![],
                    final_answer: Some("a".into()),
                    terminated_by: Termination::Answer,
                    transcript,
                    violations: vec![],
                    error: None,
                    tokens: TokenAccount::default(),
                },
                rewards: RewardBreakdown {
                    r_format: format,
                    r_outcome: outcome,
                    r_process: process,
                    total: (format + outcome + process) / 3.0,
                    ..Default::default()
                },
            });
        }
    }
    let pairs = build_pairs(&samples, "{question}").map_err(|e| e.to_string())?;

    // checker: only the definitions, looked up on the original samples
    let lookup: HashMap<(String, usize), &SampleRecord> =
        samples.iter().map(|s| ((s.question_id.clone(), s.path_id), s)).collect();
    let mut used = HashSet::new();
    let mut kinds: HashMap<&str, usize> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let c = lookup[&(p.question_id.clone(), p.chosen_path_id)];
        let r = lookup[&(p.question_id.clone(), p.rejected_path_id)];
        let (cf, co, cp) = (c.rewards.r_format, c.rewards.r_outcome, c.rewards.r_process);
        let (rf, ro, rp) = (r.rewards.r_format, r.rewards.r_outcome, r.rewards.r_process);
        let single = c.hop_kind == HopKind::Single;
        let chosen_ok = cf == 1.0
            && if single { co == 1.0 } else { (co == 1.0 && cp >= 0.7) || (co >= 0.8 && cp >= 0.8) };
        ensure!(chosen_ok, "pair {i}: chosen violates the chosen-set rule");
        let (kind_ok, name) = match p.rejection_kind {
            RejectionKind::Format => (rf == 0.0, "format"),
            RejectionKind::Easy => (rf == 1.0 && ro <= 0.3, "easy"),
            RejectionKind::Hard => (!single && rf == 1.0 && ro > 0.3 && ro <= co - 0.3 && rp <= cp, "hard"),
        };
        ensure!(kind_ok, "pair {i}: rejected does not satisfy the {name} definition");
        ensure!(c.path_id != r.path_id, "pair {i}: chosen paired with itself");
        ensure!(used.insert((p.question_id.clone(), p.rejected_path_id)), "pair {i}: rejected path reused");
        ensure!(p.chosen == c.path.transcript && p.rejected == r.path.transcript, "pair {i}: transcript mismatch");
        *kinds.entry(name).or_default() += 1;
    }
    for k in ["format", "easy", "hard"] {
        ensure!(kinds.get(k).copied().unwrap_or(0) > 0, "no {k} rejections produced; batch is not exercising the rule");
    }
    Ok(format!(
        "600 questions x 8 samples, {} pairs (format {}, easy {}, hard {}) all valid, no reuse",
        pairs.len(),
        kinds["format"],
        kinds["easy"],
        kinds["hard"]
    ))
}

// ---------------------------------------------------------------------------
// 5. End-to-end case

struct Fixture {
    corpus: ChunkCorpus,
    kg: KnowledgeGraphIndex,
    generator: ScriptedGenerator,
    qa: QaRecord,
}

fn load_fixture() -> Result<Fixture, String> {
    let open = |n: &str| File::open(data(n)).map(BufReader::new).map_err(|e| format!("{n}: {e}"));
    let corpus = ingest_chunks(open("westphal_chunks.jsonl")?, &WhitespaceTokenizer).map_err(|e| e.to_string())?;
    let triplets = read_triplets(open("westphal_triplets.jsonl")?).map_err(|e| e.to_string())?;
    let kg = KnowledgeGraphIndex::from_triplets(triplets, Some(&corpus)).map_err(|e| e.to_string())?;
    let generator = ScriptedGenerator::from_jsonl(open("westphal_mock.jsonl")?)?;
    let qa_line = std::fs::read_to_string(data("westphal_qa.jsonl")).map_err(|e| e.to_string())?;
    let qa: QaRecord = serde_json::from_str(qa_line.trim()).map_err(|e| e.to_string())?;
    Ok(Fixture { corpus, kg, generator, qa })
}

fn end_to_end_case() -> Check {
    let fx = load_fixture()?;
    ensure!(fx.corpus.len() == 12 && fx.kg.triplets().len() == 30, "fixture is not 12 chunks / 30 triplets");
    let cfg = AgentConfig::default();
    let retriever = Retriever::local(&fx.corpus, &fx.kg, cfg.retrieval).map_err(|e| e.to_string())?;
    let agent = Agent::new(&retriever, &fx.generator, &WhitespaceTokenizer, cfg.clone()).map_err(|e| e.to_string())?;
    let path = agent.run(&fx.qa.question, 0);
    ensure!(path.final_answer.as_deref() == Some("Kreuzlingen"), "answer {:?}", path.final_answer);
    ensure!(path.k() == 1, "k = {}", path.k());
    let golden = GoldenEvidence::new(fx.qa.golden.clone());
    let b = score_path(&path, &fx.qa.answers, &golden, &LexicalReranker, fx.qa.hop_kind).map_err(|e| e.to_string())?;
    ensure!(b.r_format == 1.0, "format reward {}", b.r_format);

    let step = &path.steps[0];
    let texts: Vec<&str> = step.context.iter().map(|c| c.text.as_str()).collect();
    let father = "Triplet: Alexander Carl Otto Westphal father Carl Friedrich Otto Westphal";
    let son_of = "Triplet: Alexander Carl Otto Westphal son of Carl Friedrich Otto Westphal";
    ensure!(texts.contains(&father) && texts.contains(&son_of), "father triplets missing from context {texts:#?}");
    ensure!(
        step.context.iter().any(|c| c.kind == HitKind::Chunk && c.item_id == "c03"),
        "death-place chunk c03 missing from context {texts:#?}"
    );
    // the father triplets are extracted from the death-place chunk
    for t in fx.kg.triplets().iter().filter(|t| t.relation == "father" || t.relation == "son of") {
        if t.head.starts_with("Alexander") {
            ensure!(t.source_chunk_id.as_deref() == Some("c03"), "father triplet not sourced from c03");
        }
    }

    let tok = WhitespaceTokenizer;
    let selected: usize = texts.iter().map(|t| tok.count(t)).sum();
    let baseline: usize = step
        .trace
        .chunks
        .iter()
        .map(|h| render_chunk(fx.corpus.get(&h.item_id).expect("chunk")))
        .chain(step.trace.triplets.iter().map(|h| render_triplet(fx.kg.triplet(h.triplet_id().unwrap()).unwrap())))
        .map(|t| tok.count(&t))
        .sum();
    ensure!(
        step.trace.chunks.len() == cfg.retrieval.chunk_keep && step.trace.triplets.len() <= cfg.retrieval.edge_keep,
        "baseline is not k_d = 5 chunks + up to k_t = 10 triplets"
    );
    ensure!(selected < baseline, "selected context {selected} tokens >= baseline {baseline}");
    Ok(format!(
        "answer Kreuzlingen, k = 1, format = 1, context {} items / {selected} tokens vs baseline {} + {} items / {baseline} tokens ({:.1}%)",
        texts.len(),
        step.trace.chunks.len(),
        step.trace.triplets.len(),
        100.0 * selected as f64 / baseline as f64
    ))
}

// ---------------------------------------------------------------------------
// 6. Masking and token accounting

const OPEN: &str = "<Reference>";
const CLOSE: &str = "</Reference>";

/// Char-level tag matcher: returns interior spans or None when unbalanced.
fn oracle_spans(text: &str) -> Option<Vec<(usize, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let open: Vec<char> = OPEN.chars().collect();
    let close: Vec<char> = CLOSE.chars().collect();
    let at = |i: usize, pat: &[char]| chars.len() >= i + pat.len() && chars[i..i + pat.len()] == *pat;
    let mut spans = Vec::new();
    let mut inside: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        if at(i, &open) {
            if inside.is_some() {
                return None;
            }
            inside = Some(i + open.len());
            i += open.len();
        } else if at(i, &close) {
            spans.push((inside?, i));
            inside = None;
            i += close.len();
        } else {
            i += 1;
        }
    }
    inside.is_none().then_some(spans)
}

fn random_piece(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] = ["alpha", "béta", "日本", "<Ref", "Reference>", "x", "Evidence", "1:", "</Ref", "\n", "  ", "Final"];
    (0..rng.gen_range(0..8)).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn masking_and_accounting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let tok = WhitespaceTokenizer;
    let mut blocks_seen = 0;
    let mut malformed = 0;
    for i in 0..200 {
        let mut t = String::new();
        for _ in 0..rng.gen_range(0..5) {
            t.push_str(&random_piece(&mut rng));
            t.push_str(OPEN);
            t.push_str(&random_piece(&mut rng));
            t.push_str(CLOSE);
        }
        t.push_str(&random_piece(&mut rng));
        if rng.gen_bool(0.1) {
            t.push_str(if rng.gen_bool(0.5) { OPEN } else { CLOSE });
        }
        let oracle = oracle_spans(&t);
        let got = compute_mask_spans(&t);
        let acct = account_text(&t, &tok);
        match (oracle, got, acct) {
            (None, Err(_), Err(_)) => malformed += 1,
            (Some(want), Ok(spans), Ok(a)) => {
                let got: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
                ensure!(got == want, "transcript {i}: spans {got:?} vs oracle {want:?}");
                let chars: Vec<char> = t.chars().collect();
                let mut retrieved = 0;
                let mut thinking = 0;
                let mut pos = 0;
                for &(s, e) in &want {
                    let before: String = chars[pos..s - OPEN.chars().count()].iter().collect();
                    let inner: String = chars[s..e].iter().collect();
                    ensure!(!inner.contains(OPEN) && !inner.contains(CLOSE), "transcript {i}: span covers a tag");
                    thinking += before.split_whitespace().count();
                    retrieved += inner.split_whitespace().count();
                    pos = e + CLOSE.chars().count();
                }
                thinking += chars[pos..].iter().collect::<String>().split_whitespace().count();
                ensure!(a.total_tokens == a.thinking_tokens + a.retrieved_tokens, "transcript {i}: identity broken");
                ensure!(
                    (a.thinking_tokens, a.retrieved_tokens, a.retrieval_calls) == (thinking, retrieved, want.len()),
                    "transcript {i}: account {a:?} vs oracle ({thinking}, {retrieved}, {})",
                    want.len()
                );
                blocks_seen += want.len();
            }
            (o, g, a) => {
                return Err(format!(
                    "transcript {i}: oracle balanced = {}, spans ok = {}, account ok = {}",
                    o.is_some(),
                    g.is_ok(),
                    a.is_ok()
                ))
            }
        }
    }
    Ok(format!("200 transcripts ({blocks_seen} blocks, {malformed} malformed rejected by both), identity exact"))
}

// ---------------------------------------------------------------------------
// 7. Determinism

fn pipeline_bytes(seed: u64) -> Result<Vec<u8>, String> {
    let fx = load_fixture()?;
    let mut out: Vec<String> = Vec::new();

    // ingest → rule-extracted kg alongside the fixture kg
    let (rule_kg, skipped) = build_knowledge_graph(&fx.corpus, &RuleExtractor).map_err(|e| e.to_string())?;
    out.push(serde_json::to_string(&(rule_kg.triplets(), skipped)).unwrap());

    let cfg = AgentConfig { samples: 4, ..Default::default() };
    let retriever = Retriever::local(&fx.corpus, &fx.kg, cfg.retrieval).map_err(|e| e.to_string())?;
    let agent = Agent::new(&retriever, &fx.generator, &WhitespaceTokenizer, cfg.clone()).map_err(|e| e.to_string())?;

    // retrieve → kag → ppr
    let ents = vec!["Alexander Carl Otto Westphal".to_string()];
    let ctx = agent
        .step_context(&ents, "Who was the father of Alexander Carl Otto Westphal?")
        .map_err(|e| e.to_string())?;
    out.push(to_dot(&ctx.graph, Some(&ctx.pi)));
    out.push(serde_json::to_string(&ctx.context).unwrap());
    let pi2 = ppr(&ctx.graph, &cfg.ppr).map_err(|e| e.to_string())?;
    out.push(format!("{:?}", pi2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));

    // agent → score → pairs
    let records: Vec<PathRecord> = agent
        .sample_paths(&fx.qa.question, cfg.samples)
        .into_iter()
        .enumerate()
        .map(|(i, path)| PathRecord { question_id: fx.qa.id.clone(), path_id: i, path })
        .collect();
    out.push(serde_json::to_string(&records).unwrap());
    let scored = score_samples(&records, std::slice::from_ref(&fx.qa), &LexicalReranker).map_err(|e| e.to_string())?;
    out.push(serde_json::to_string(&scored).unwrap());
    let pairs = build_pairs(&scored, &cfg.instruction).map_err(|e| e.to_string())?;
    out.push(serde_json::to_string(&pairs).unwrap());

    // seeded sft
    let d = Decomposition {
        id: "westphal".into(),
        question: fx.qa.question.clone(),
        hops: vec![
            DecompositionHop {
                subquery: "Who was the father of Alexander Carl Otto Westphal?".into(),
                entities: None,
                paragraphs: vec![fx.corpus.get("c01").unwrap().text.clone(), fx.corpus.get("c03").unwrap().text.clone()],
                triplets: vec![SupportTriplet {
                    head: "Alexander Carl Otto Westphal".into(),
                    relation: "father".into(),
                    tail: "Carl Friedrich Otto Westphal".into(),
                }],
                answer: "Carl Friedrich Otto Westphal".into(),
            },
            DecompositionHop {
                subquery: "Where did Carl Friedrich Otto Westphal die?".into(),
                entities: None,
                paragraphs: vec![fx.corpus.get("c03").unwrap().text.clone()],
                triplets: vec![SupportTriplet {
                    head: "Carl Friedrich Otto Westphal".into(),
                    relation: "died in".into(),
                    tail: "Kreuzlingen".into(),
                }],
                answer: "Kreuzlingen".into(),
            },
        ],
        answer: "Kreuzlingen".into(),
    };
    out.push(serde_json::to_string(&build_sft_record(&d, seed, &cfg.instruction).map_err(|e| e.to_string())?).unwrap());
    if pairs.is_empty() {
        return Err("pipeline produced no pairs; determinism check would be vacuous".into());
    }
    Ok(out.join("\n").into_bytes())
}

fn determinism() -> Check {
    let a = pipeline_bytes(42)?;
    let b = pipeline_bytes(42)?;
    ensure!(a == b, "two runs with seed 42 differ");
    let c = pipeline_bytes(43)?;
    ensure!(a != c, "seed has no effect on the output");
    Ok(format!("two runs byte-identical ({} bytes); a different seed changes the output", a.len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let checks: [(&str, fn() -> Check); 7] = [
        ("ppr-oracle-equivalence", ppr_oracle),
        ("kag-edge-rule-conformance", kag_edge_rules),
        ("reward-formula-suite", reward_suite),
        ("pair-construction-constraints", pair_constraints),
        ("end-to-end-case-fixture", end_to_end_case),
        ("masking-and-accounting", masking_and_accounting),
        ("pipeline-determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
