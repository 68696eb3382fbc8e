use std::fmt::Write;

use super::{EdgeKind, Kag, NodeKind};

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering; node labels carry π when given.
pub fn to_dot(graph: &Kag, pi: Option<&[f64]>) -> String {
    let mut out = String::from("graph kag {\n");
    for (i, n) in graph.nodes.iter().enumerate() {
        let shape = match n.kind {
            NodeKind::Subquery => "doublecircle",
            NodeKind::Chunk => "box",
            NodeKind::Triplet => "diamond",
            NodeKind::Entity => "ellipse",
        };
        let mut label = escape(&n.payload_ref);
        if let Some(p) = pi.and_then(|p| p.get(i)) {
            let _ = write!(label, "\\nπ={p:.4}");
        }
        let _ = writeln!(out, "  n{i} [label=\"{label}\", shape={shape}];");
    }
    for e in &graph.edges {
        let style = match e.kind {
            EdgeKind::Cooccurrence => "solid",
            EdgeKind::Relevance => "dashed",
        };
        let _ = writeln!(out, "  n{} -- n{} [label=\"{:.3}\", style={style}];", e.a, e.b, e.weight);
    }
    out.push_str("}\n");
    out
}
