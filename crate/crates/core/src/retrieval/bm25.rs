use std::collections::HashMap;

use crate::text::lexical_tokens;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Okapi BM25 over [`lexical_tokens`], idf = ln(1 + (N − df + 0.5)/(df + 0.5)).
#[derive(Debug, Clone, Default)]
pub struct Bm25Index {
    docs: Vec<HashMap<String, u32>>,
    lens: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut idx = Self::default();
        for d in docs {
            let toks = lexical_tokens(d);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *idx.df.entry(t.clone()).or_default() += 1;
            }
            idx.lens.push(toks.len());
            idx.docs.push(tf);
        }
        let total: usize = idx.lens.iter().sum();
        idx.avgdl = if idx.docs.is_empty() { 0.0 } else { total as f64 / idx.docs.len() as f64 };
        idx
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Scores every document against the distinct query terms, in query order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut terms: Vec<String> = Vec::new();
        for t in lexical_tokens(query) {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let n = self.docs.len() as f64;
        let idf: Vec<f64> = terms
            .iter()
            .map(|t| {
                let df = self.df.get(t).copied().unwrap_or(0) as f64;
                (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
            })
            .collect();
        self.docs
            .iter()
            .zip(&self.lens)
            .map(|(tf, &dl)| {
                let norm = if self.avgdl > 0.0 { dl as f64 / self.avgdl } else { 0.0 };
                terms
                    .iter()
                    .zip(&idf)
                    .map(|(t, w)| {
                        let f = tf.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            w * f * (K1 + 1.0) / (f + K1 * (1.0 - B + B * norm))
                        }
                    })
                    .sum()
            })
            .collect()
    }
}
