use super::{Kag, KagError, PprConfig};

/// Subquery node 1, each key-entity node 0.5, scaled to sum 1.
pub fn personalization(graph: &Kag) -> Result<Vec<f64>, KagError> {
    let q = graph.subquery_node()?;
    let mut p = vec![0.0; graph.nodes.len()];
    p[q] = 1.0;
    for &k in &graph.key_entity_ids {
        if k != q && k < p.len() {
            p[k] = 0.5;
        }
    }
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    Ok(p)
}

pub fn ppr(graph: &Kag, cfg: &PprConfig) -> Result<Vec<f64>, KagError> {
    ppr_observed(graph, cfg, |_, _| {})
}

/// π ← αWπ + (1−α)p starting from π₀ = p, where W is the column-normalized
/// weighted adjacency (isolated nodes get a unit self-loop). `observe` sees
/// π₀ and every iterate.
pub fn ppr_observed(
    graph: &Kag,
    cfg: &PprConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>, KagError> {
    cfg.validate()?;
    let p = personalization(graph)?;
    let n = graph.nodes.len();

    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in &graph.edges {
        neighbors[e.a].push((e.b, e.weight));
        neighbors[e.b].push((e.a, e.weight));
    }
    let strength: Vec<f64> = neighbors.iter().map(|ns| ns.iter().map(|&(_, w)| w).sum()).collect();

    let alpha = cfg.alpha;
    let mut pi = p.clone();
    let mut next = vec![0.0; n];
    observe(0, &pi);
    for it in 1..=cfg.iterations {
        for (x, &pk) in next.iter_mut().zip(&p) {
            *x = (1.0 - alpha) * pk;
        }
        for j in 0..n {
            if pi[j] == 0.0 {
                continue;
            }
            if strength[j] > 0.0 {
                let mass = alpha * pi[j] / strength[j];
                for &(i, w) in &neighbors[j] {
                    next[i] += mass * w;
                }
            } else {
                next[j] += alpha * pi[j];
            }
        }
        let delta = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut pi, &mut next);
        observe(it, &pi);
        if matches!(cfg.epsilon, Some(eps) if delta < eps) {
            break;
        }
    }
    Ok(pi)
}
