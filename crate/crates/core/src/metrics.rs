//! Answer metrics (EM, F1) and token-efficiency accounting.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::agent::{ReasoningPath, Termination};
use crate::text::{normalize_answer, token_f1, Tokenizer};
use crate::transcript::{reference_blocks, TranscriptError, REF_CLOSE, REF_OPEN};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenAccount {
    pub thinking_tokens: usize,
    pub retrieved_tokens: usize,
    pub total_tokens: usize,
    pub retrieval_calls: usize,
    pub content_per_retrieval: f64,
}

impl TokenAccount {
    pub fn new(thinking_tokens: usize, retrieved_tokens: usize, retrieval_calls: usize) -> Self {
        Self {
            thinking_tokens,
            retrieved_tokens,
            total_tokens: thinking_tokens + retrieved_tokens,
            retrieval_calls,
            content_per_retrieval: if retrieval_calls == 0 {
                0.0
            } else {
                retrieved_tokens as f64 / retrieval_calls as f64
            },
        }
    }

    pub fn merge(&self, other: &TokenAccount) -> TokenAccount {
        Self::new(
            self.thinking_tokens + other.thinking_tokens,
            self.retrieved_tokens + other.retrieved_tokens,
            self.retrieval_calls + other.retrieval_calls,
        )
    }
}

/// Reference-block interiors are retrieved tokens; everything else except
/// the tags themselves is thinking. Each outside segment is counted on its
/// own so a tag never glues two words together.
pub fn account_text(text: &str, tokenizer: &dyn Tokenizer) -> Result<TokenAccount, TranscriptError> {
    let blocks = reference_blocks(text)?;
    let mut thinking = 0;
    let mut retrieved = 0;
    let mut pos = 0;
    for r in &blocks {
        thinking += tokenizer.count(&text[pos..r.start - REF_OPEN.len()]);
        retrieved += tokenizer.count(&text[r.clone()]);
        pos = r.end + REF_CLOSE.len();
    }
    thinking += tokenizer.count(&text[pos..]);
    Ok(TokenAccount::new(thinking, retrieved, blocks.len()))
}

pub fn account_tokens(path: &ReasoningPath, tokenizer: &dyn Tokenizer) -> Result<TokenAccount, TranscriptError> {
    account_text(&path.transcript, tokenizer)
}

pub fn exact_match(answer: &str, truths: &[String]) -> f64 {
    let a = normalize_answer(answer);
    f64::from(u8::from(truths.iter().any(|t| normalize_answer(t) == a)))
}

pub fn f1_metric(answer: &str, truths: &[String]) -> f64 {
    truths.iter().map(|t| token_f1(answer, t)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AverageTokens {
    pub thinking: f64,
    pub retrieved: f64,
    pub total: f64,
    pub retrieval_calls: f64,
    /// Pooled: all retrieved tokens over all retrieval calls.
    pub content_per_retrieval: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub avg_steps: f64,
    /// Step count → fraction of paths.
    pub step_histogram: BTreeMap<usize, f64>,
    pub terminated: BTreeMap<String, usize>,
    pub tokens: AverageTokens,
}

/// One evaluated path: the path, its ground truths, and its token account.
pub struct EvalItem<'a> {
    pub path: &'a ReasoningPath,
    pub truths: &'a [String],
    pub tokens: TokenAccount,
}

pub fn report(items: &[EvalItem<'_>]) -> Report {
    let n = items.len();
    if n == 0 {
        return Report::default();
    }
    let nf = n as f64;
    let mut r = Report { count: n, ..Default::default() };
    let mut sum = TokenAccount::default();
    for it in items {
        let answer = it.path.final_answer.as_deref().unwrap_or("");
        r.em += exact_match(answer, it.truths);
        r.f1 += f1_metric(answer, it.truths);
        r.avg_steps += it.path.steps.len() as f64;
        *r.step_histogram.entry(it.path.steps.len()).or_insert(0.0) += 1.0;
        let key = match it.path.terminated_by {
            Termination::Answer => "answer",
            Termination::StepCap => "step_cap",
            Termination::Error => "error",
        };
        *r.terminated.entry(key.to_string()).or_insert(0) += 1;
        sum = sum.merge(&it.tokens);
    }
    r.em /= nf;
    r.f1 /= nf;
    r.avg_steps /= nf;
    r.step_histogram.values_mut().for_each(|v| *v /= nf);
    r.tokens = AverageTokens {
        thinking: sum.thinking_tokens as f64 / nf,
        retrieved: sum.retrieved_tokens as f64 / nf,
        total: sum.total_tokens as f64 / nf,
        retrieval_calls: sum.retrieval_calls as f64 / nf,
        content_per_retrieval: sum.content_per_retrieval,
    };
    r
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "paths            {}", self.count);
        let _ = writeln!(s, "EM               {:.4}", self.em);
        let _ = writeln!(s, "F1               {:.4}", self.f1);
        let _ = writeln!(s, "avg steps        {:.3}", self.avg_steps);
        let _ = writeln!(s, "thinking tokens  {:.1}", self.tokens.thinking);
        let _ = writeln!(s, "retrieved tokens {:.1}", self.tokens.retrieved);
        let _ = writeln!(s, "total tokens     {:.1}", self.tokens.total);
        let _ = writeln!(s, "retrievals       {:.2}", self.tokens.retrieval_calls);
        let _ = writeln!(s, "content/retrieval {:.1}", self.tokens.content_per_retrieval);
        let _ = writeln!(s, "steps:");
        for (k, v) in &self.step_histogram {
            let _ = writeln!(s, "  {k:>2}  {v:.3}");
        }
        let _ = writeln!(s, "terminated:");
        for (k, v) in &self.terminated {
            let _ = writeln!(s, "  {k:<9} {v}");
        }
        s
    }
}
