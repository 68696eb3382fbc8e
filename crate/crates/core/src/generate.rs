//! Text-generation backends: an HTTP endpoint client and a scripted mock
//! that replays fixture segments keyed by (question, variant, step, phase).

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::{EndpointConfig, EndpointError, JsonClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Entities + subquery, or a final answer.
    Plan,
    Summary,
    /// Answer-only generation forced at the step cap.
    Answer,
    Extract,
}

/// Routing information for scripted backends. Not sent over the wire.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationMeta {
    pub question: String,
    pub step: usize,
    pub phase: Option<Phase>,
    pub variant: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub stop: Vec<String>,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub meta: GenerationMeta,
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("scripted backend: {0}")]
    Script(String),
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerationError>;
}

impl<F> Generator for F
where
    F: Fn(&GenerationRequest) -> Result<String, GenerationError> + Send + Sync,
{
    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerationError> {
        self(req)
    }
}

/// Cuts `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stop: &'a [String],
    temperature: f64,
    max_new_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    text: String,
}

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: JsonClient,
    model: String,
}

impl HttpGenerator {
    pub fn new(cfg: EndpointConfig, model: impl Into<String>) -> Result<Self, EndpointError> {
        Ok(Self {
            client: JsonClient::new(cfg)?,
            model: model.into(),
        })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerationError> {
        let resp: WireResponse = self.client.post(&WireRequest {
            model: &self.model,
            prompt: &req.prompt,
            stop: &req.stop,
            temperature: req.temperature,
            max_new_tokens: req.max_new_tokens,
        })?;
        Ok(truncate_at_stop(&resp.text, &req.stop).to_string())
    }
}

/// One line of a mock fixture file. `step: null` matches any step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub question: String,
    #[serde(default)]
    pub variant: usize,
    #[serde(default)]
    pub step: Option<usize>,
    pub phase: Phase,
    pub text: String,
}

type ScriptKey = (String, usize, Option<usize>, Phase);

/// Deterministic generator replaying fixture segments. Requests for a variant
/// beyond those scripted for a question wrap around modulo the variant count.
#[derive(Debug, Clone, Default)]
pub struct ScriptedGenerator {
    segments: HashMap<ScriptKey, String>,
    variants: HashMap<String, usize>,
}

impl ScriptedGenerator {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut g = Self::default();
        for e in entries {
            let v = g.variants.entry(e.question.clone()).or_insert(0);
            *v = (*v).max(e.variant + 1);
            g.segments.insert((e.question, e.variant, e.step, e.phase), e.text);
        }
        g
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str::<ScriptEntry>(&line)
                    .map_err(|e| format!("mock fixture line {}: {e}", i + 1))?,
            );
        }
        Ok(Self::new(entries))
    }

    pub fn variant_count(&self, question: &str) -> usize {
        self.variants.get(question).copied().unwrap_or(0)
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GenerationError> {
        let m = &req.meta;
        let phase = m
            .phase
            .ok_or_else(|| GenerationError::Script("request carries no phase".into()))?;
        let n = self.variant_count(&m.question);
        if n == 0 {
            return Err(GenerationError::Script(format!("no script for question {:?}", m.question)));
        }
        let variant = m.variant % n;
        let q = m.question.clone();
        let text = self
            .segments
            .get(&(q.clone(), variant, Some(m.step), phase))
            .or_else(|| self.segments.get(&(q, variant, None, phase)))
            .ok_or_else(|| {
                GenerationError::Script(format!(
                    "no segment for variant {variant}, step {}, phase {phase:?}",
                    m.step
                ))
            })?;
        Ok(truncate_at_stop(text, &req.stop).to_string())
    }
}
