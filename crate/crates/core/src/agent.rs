//! Multi-step reasoning loop: plan (entities + subquery) → hybrid retrieval →
//! KAG → PPR → context selection → reference block → summary, until the
//! model answers or the step cap forces an answer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{GenerationError, GenerationMeta, GenerationRequest, Generator, Phase};
use crate::kag::{build_kag, ppr, select_context, ContextItem, Kag, KagError, PprConfig};
use crate::metrics::{account_text, TokenAccount};
use crate::retrieval::{RetrievalConfig, RetrievalError, Retriever, ScoredHit};
use crate::text::Tokenizer;
use crate::transcript::{
    parse_step, parse_summary, render_reference_block, ParsedSegment, Violation, REF_OPEN,
};

pub const DEFAULT_INSTRUCTION: &str = "Answer the question step by step. In each step write \
\"Important entity: <entities>\" and \"Subquery: <subquery>\". Evidence will follow between \
<Reference> and </Reference>; then write \"Summary: <summary>\". When the question can be \
answered, write \"Final answer: <answer>\".\nQuestion: {question}";

pub const DEFAULT_ANSWER_INSTRUCTION: &str =
    "The step limit is reached. Reply with a single line starting with \"Final answer: \".";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Kag(#[from] KagError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    StepCap,
    Error,
}

/// Retrieval outcome behind one step's context, before PPR filtering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub entities: Vec<String>,
    pub chunks: Vec<ScoredHit>,
    pub triplets: Vec<ScoredHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// 1-based.
    pub index: usize,
    pub key_entities: Vec<String>,
    pub subquery: String,
    pub context: Vec<ContextItem>,
    pub summary: String,
    #[serde(default)]
    pub violations: Vec<Violation>,
    #[serde(default)]
    pub tokens: TokenAccount,
    #[serde(default)]
    pub trace: StepTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub question: String,
    #[serde(default)]
    pub variant: usize,
    pub steps: Vec<ReasoningStep>,
    pub final_answer: Option<String>,
    pub terminated_by: Termination,
    pub transcript: String,
    /// Violations outside any step (answer line, unparseable plans).
    #[serde(default)]
    pub violations: Vec<Violation>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub tokens: TokenAccount,
}

impl ReasoningPath {
    pub fn k(&self) -> usize {
        self.steps.len()
    }
}

/// One line of a path file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub question_id: String,
    pub path_id: usize,
    pub path: ReasoningPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_steps: usize,
    pub retrieval: RetrievalConfig,
    pub ppr: PprConfig,
    /// `{question}` is substituted.
    pub instruction: String,
    pub answer_instruction: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    /// R
    pub samples: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_steps: 5,
            retrieval: RetrievalConfig::default(),
            ppr: PprConfig::default(),
            instruction: DEFAULT_INSTRUCTION.into(),
            answer_instruction: DEFAULT_ANSWER_INSTRUCTION.into(),
            temperature: 0.7,
            max_new_tokens: 256,
            samples: 8,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_steps == 0 {
            return Err(AgentError::InvalidConfig("max_steps must be >= 1".into()));
        }
        if self.samples == 0 {
            return Err(AgentError::InvalidConfig("samples must be >= 1".into()));
        }
        self.retrieval.validate()?;
        self.ppr.validate()?;
        Ok(())
    }
}

/// Everything computed for one subquery between planning and summarizing.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub trace: StepTrace,
    pub graph: Kag,
    pub pi: Vec<f64>,
    pub context: Vec<ContextItem>,
}

/// Result of one loop iteration. `text` is what the iteration appended to
/// the transcript.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Step { step: ReasoningStep, text: String },
    Answer { answer: String, violations: Vec<Violation>, text: String },
    Failed { step: Option<ReasoningStep>, violations: Vec<Violation>, text: String, error: String },
}

pub struct Agent<'a> {
    retriever: &'a Retriever<'a>,
    generator: &'a dyn Generator,
    tokenizer: &'a dyn Tokenizer,
    cfg: AgentConfig,
}

impl<'a> Agent<'a> {
    /// The retriever carries its own retrieval config; `cfg.retrieval` is
    /// only validated here.
    pub fn new(
        retriever: &'a Retriever<'a>,
        generator: &'a dyn Generator,
        tokenizer: &'a dyn Tokenizer,
        cfg: AgentConfig,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        Ok(Self {
            retriever,
            generator,
            tokenizer,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    fn prompt(&self, question: &str, transcript: &str, tail: Option<&str>) -> String {
        let mut p = self.cfg.instruction.replace("{question}", question);
        for part in [Some(transcript), tail].into_iter().flatten().filter(|s| !s.is_empty()) {
            p.push('\n');
            p.push_str(part);
        }
        p
    }

    fn generate(
        &self,
        question: &str,
        variant: usize,
        step: usize,
        phase: Phase,
        prompt: String,
        stop: &[&str],
    ) -> Result<String, GenerationError> {
        self.generator.generate(&GenerationRequest {
            prompt,
            stop: stop.iter().map(|s| s.to_string()).collect(),
            temperature: self.cfg.temperature,
            max_new_tokens: self.cfg.max_new_tokens,
            meta: GenerationMeta {
                question: question.to_string(),
                step,
                phase: Some(phase),
                variant,
            },
        })
    }

    /// Hybrid retrieval, KAG, PPR and selection for one subquery.
    pub fn step_context(&self, key_entities: &[String], subquery: &str) -> Result<StepContext, AgentError> {
        let chunks = self.retriever.semantic_retrieve(subquery)?;
        let graph = self.retriever.graph_retrieve(key_entities, subquery)?;
        let (corpus, kg) = (self.retriever.corpus(), self.retriever.kg());
        let kag = build_kag(subquery, key_entities, &chunks, &graph.triplets, corpus, kg, &self.cfg.ppr);
        let pi = ppr(&kag, &self.cfg.ppr)?;
        let context = select_context(&kag, &pi, &self.cfg.ppr, corpus, kg)?;
        Ok(StepContext {
            trace: StepTrace {
                entities: graph.entities,
                chunks,
                triplets: graph.triplets,
            },
            graph: kag,
            pi,
            context,
        })
    }

    fn account(&self, text: &str) -> TokenAccount {
        // Reference blocks here are engine-made and always balanced.
        account_text(text, self.tokenizer).unwrap_or_default()
    }

    /// One iteration of the loop given the transcript so far.
    pub fn run_step(&self, question: &str, variant: usize, index: usize, transcript: &str) -> StepOutcome {
        let plan = match self.generate(question, variant, index, Phase::Plan, self.prompt(question, transcript, None), &[REF_OPEN]) {
            Ok(t) => t,
            Err(e) => {
                return StepOutcome::Failed {
                    step: None,
                    violations: vec![],
                    text: String::new(),
                    error: e.to_string(),
                }
            }
        };
        let plan_text = plan.trim().to_string();
        let fields = match parse_step(&plan) {
            ParsedSegment::FinalAnswer { answer, violations } => {
                return StepOutcome::Answer { answer, violations, text: plan_text };
            }
            ParsedSegment::Violation(violations) => {
                return StepOutcome::Failed {
                    step: None,
                    violations,
                    text: plan_text,
                    error: format!("step {index}: neither a subquery nor a final answer"),
                };
            }
            ParsedSegment::Step(f) => f,
        };
        let subquery = fields.subquery.clone().unwrap_or_default();
        let mut step = ReasoningStep {
            index,
            key_entities: fields.key_entities.clone(),
            subquery: subquery.clone(),
            context: vec![],
            summary: fields.summary.clone().unwrap_or_default(),
            violations: fields.violations,
            tokens: TokenAccount::default(),
            trace: StepTrace::default(),
        };
        if fields.summary.is_some() {
            // The summary must follow the reference block.
            step.violations.push(Violation::OutOfOrder("Summary:".into()));
        }
        let ctx = match self.step_context(&step.key_entities, &subquery) {
            Ok(c) => c,
            Err(e) => {
                step.tokens = self.account(&plan_text);
                return StepOutcome::Failed {
                    step: Some(step),
                    violations: vec![],
                    text: plan_text,
                    error: e.to_string(),
                };
            }
        };
        step.trace = ctx.trace;
        let block = render_reference_block(&ctx.context.iter().map(|c| c.text.as_str()).collect::<Vec<_>>());
        step.context = ctx.context;

        let mut text = format!("{plan_text}\n{block}");
        let so_far = if transcript.is_empty() { text.clone() } else { format!("{transcript}\n{text}") };
        let summary = self.generate(
            question,
            variant,
            index,
            Phase::Summary,
            self.prompt(question, &so_far, None),
            &["\nImportant entity:", "\nFinal answer:", REF_OPEN],
        );
        match summary {
            Ok(raw) => {
                let (summary, violations) = parse_summary(&raw);
                step.summary = summary;
                step.violations.extend(violations);
                let raw = raw.trim();
                if !raw.is_empty() {
                    text.push('\n');
                    text.push_str(raw);
                }
                step.tokens = self.account(&text);
                StepOutcome::Step { step, text }
            }
            Err(e) => {
                step.violations.push(Violation::MissingSummary);
                step.tokens = self.account(&text);
                StepOutcome::Failed {
                    step: Some(step),
                    violations: vec![],
                    text,
                    error: e.to_string(),
                }
            }
        }
    }

    /// One reasoning path. `variant` selects the sampling variant (scripted
    /// backends key on it).
    pub fn run(&self, question: &str, variant: usize) -> ReasoningPath {
        let mut parts: Vec<String> = Vec::new();
        let mut steps = Vec::new();
        let mut violations = Vec::new();
        let mut final_answer = None;
        let mut error = None;
        let mut terminated_by = Termination::StepCap;

        for index in 1..=self.cfg.max_steps {
            let transcript = parts.join("\n");
            match self.run_step(question, variant, index, &transcript) {
                StepOutcome::Step { step, text } => {
                    steps.push(step);
                    parts.push(text);
                    continue;
                }
                StepOutcome::Answer { answer, violations: v, text } => {
                    parts.push(text);
                    violations.extend(v);
                    final_answer = Some(answer);
                    terminated_by = Termination::Answer;
                }
                StepOutcome::Failed { step, violations: v, text, error: e } => {
                    steps.extend(step);
                    if !text.is_empty() {
                        parts.push(text);
                    }
                    violations.extend(v);
                    error = Some(e);
                    terminated_by = Termination::Error;
                }
            }
            break;
        }

        if terminated_by == Termination::StepCap {
            let transcript = parts.join("\n");
            let prompt = self.prompt(question, &transcript, Some(&self.cfg.answer_instruction));
            let forced = self.generate(question, variant, self.cfg.max_steps + 1, Phase::Answer, prompt, &[REF_OPEN]);
            match forced.as_deref().map(parse_step) {
                Ok(ParsedSegment::FinalAnswer { answer, violations: v }) => {
                    parts.push(forced.unwrap_or_default().trim().to_string());
                    violations.extend(v);
                    final_answer = Some(answer);
                    terminated_by = Termination::Answer;
                }
                Ok(_) => violations.push(Violation::MissingAnswer),
                Err(e) => {
                    log::warn!("forced answer for {question:?} failed: {e}");
                    violations.push(Violation::MissingAnswer);
                }
            }
        }

        let transcript = parts.join("\n");
        let tokens = self.account(&transcript);
        ReasoningPath {
            question: question.to_string(),
            variant,
            steps,
            final_answer,
            terminated_by,
            transcript,
            violations,
            error,
            tokens,
        }
    }

    /// R independent paths (variants `0..r`), in parallel. Failures stay
    /// inside their own path.
    pub fn sample_paths(&self, question: &str, r: usize) -> Vec<ReasoningPath> {
        (0..r).into_par_iter().map(|v| self.run(question, v)).collect()
    }
}
