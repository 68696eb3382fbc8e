//! Command-line front end for the kagrag engine.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use kagrag::agent::{Agent, AgentConfig, PathRecord};
use kagrag::corpus::extract::GeneratorExtractor;
use kagrag::corpus::{build_knowledge_graph, ingest_chunks, store, RuleExtractor, TripletExtractor};
use kagrag::endpoint::{EndpointConfig, EndpointTokenizer};
use kagrag::generate::{GenerationError, GenerationRequest, Generator, HttpGenerator, ScriptedGenerator};
use kagrag::kag::to_dot;
use kagrag::metrics::{account_tokens, report, EvalItem};
use kagrag::pairs::{build_pairs, build_sft_record, score_samples, Decomposition, SampleRecord};
use kagrag::retrieval::{EndpointScorer, FirstStage, LexicalReranker, Retriever, Scorer};
use kagrag::rewards::QaRecord;
use kagrag::text::{Tokenizer, WhitespaceTokenizer};

#[derive(Parser)]
#[command(name = "kagrag", version, about = "Token-efficient agentic retrieval over a chunk corpus and knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest chunks, extract triplets and write a store directory.
    BuildKg {
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long, value_enum, default_value_t = ExtractorKind::Rule)]
        extractor: ExtractorKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        generation: GenerationArgs,
    },
    /// Print entity/triplet counts and average degrees of a store.
    KgStats { dir: PathBuf },
    /// Print ranked hits with raw scores.
    Retrieve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: String,
        /// Comma-separated key entities.
        #[arg(long, value_delimiter = ',')]
        entities: Vec<String>,
        #[arg(long, value_enum, default_value_t = Mode::Hybrid)]
        mode: Mode,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Per-step Knowledge Association Graph tools.
    Kag {
        #[command(subcommand)]
        command: KagCommand,
    },
    /// Sample reasoning paths for every question.
    Run {
        #[arg(long)]
        store: PathBuf,
        /// JSONL with `id` and `question` per line.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Agent configuration as JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        generation: GenerationArgs,
        #[command(flatten)]
        backends: BackendArgs,
    },
    /// Attach the full reward breakdown to every path.
    Score {
        #[arg(long)]
        paths: PathBuf,
        /// QA records with answers, hop kind and golden evidence.
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reranker endpoint used as the similarity model; lexical when absent.
        #[arg(long)]
        reranker_url: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Build preference pairs from scored samples.
    Pairs {
        #[arg(long)]
        scored: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Instruction template; `{question}` is substituted.
        #[arg(long)]
        instruction: Option<String>,
    },
    /// Build SFT transcripts from golden decompositions.
    SftBuild {
        #[arg(long)]
        decomp: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        instruction: Option<String>,
    },
    /// EM/F1, step statistics and token accounting over a path file.
    Eval {
        #[arg(long)]
        paths: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TokenizerKind::Whitespace)]
        tokenizer: TokenizerKind,
        /// Endpoint for `--tokenizer external`: `{text}` to `{count}`.
        #[arg(long)]
        tokenizer_url: Option<String>,
    },
}

#[derive(Subcommand)]
enum KagCommand {
    /// Build the graph for one subquery and print it.
    Dump {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, value_delimiter = ',')]
        entities: Vec<String>,
        /// Emit DOT instead of the selected context as JSON.
        #[arg(long)]
        dot: bool,
        #[command(flatten)]
        backends: BackendArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorKind {
    Rule,
    Endpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Semantic,
    Graph,
    Hybrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Whitespace,
    External,
}

#[derive(Args)]
struct GenerationArgs {
    /// Scripted generation fixture; replaces the endpoint.
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long)]
    generator_url: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 30_000)]
    generator_timeout_ms: u64,
}

#[derive(Args)]
struct BackendArgs {
    /// First-stage scoring endpoint; BM25 when absent.
    #[arg(long)]
    retriever_url: Option<String>,
    /// Reranking endpoint; lexical log-odds when absent.
    #[arg(long)]
    reranker_url: Option<String>,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

fn endpoint(url: &str, timeout_ms: u64) -> EndpointConfig {
    EndpointConfig { timeout_ms, ..EndpointConfig::new(url) }
}

impl GenerationArgs {
    fn generator(&self) -> Result<Box<dyn Generator>> {
        match (&self.mock, &self.generator_url) {
            (Some(path), _) => {
                let g = ScriptedGenerator::from_jsonl(open(path)?).map_err(|e| anyhow!("{}: {e}", path.display()))?;
                Ok(Box::new(g))
            }
            (None, Some(url)) => Ok(Box::new(HttpGenerator::new(endpoint(url, self.generator_timeout_ms), &self.model)?)),
            (None, None) => bail!("no generation backend: pass --mock <fixture> or --generator-url <url>"),
        }
    }
}

impl BackendArgs {
    fn retriever<'a>(&self, st: &'a store::Store, cfg: &AgentConfig) -> Result<Retriever<'a>> {
        let first = match &self.retriever_url {
            Some(url) => FirstStage::Endpoint(Box::new(EndpointScorer::new(endpoint(url, self.timeout_ms))?)),
            None => FirstStage::Bm25,
        };
        let reranker: Box<dyn Scorer> = match &self.reranker_url {
            Some(url) => Box::new(EndpointScorer::new(endpoint(url, self.timeout_ms))?),
            None => Box::new(LexicalReranker),
        };
        Ok(Retriever::new(&st.corpus, &st.kg, cfg.retrieval, first, reranker)?)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_store(dir: &Path) -> Result<store::Store> {
    store::load(dir, &WhitespaceTokenizer).with_context(|| format!("loading store {}", dir.display()))
}

/// Stand-in for commands that never generate text.
fn no_generation(_: &GenerationRequest) -> Result<String, GenerationError> {
    Err(GenerationError::Script("this command does not generate".into()))
}

#[derive(serde::Deserialize)]
struct QuestionLine {
    id: String,
    question: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::BuildKg { chunks, extractor, out, generation } => {
            let corpus = ingest_chunks(open(&chunks)?, &WhitespaceTokenizer)?;
            let ex: Box<dyn TripletExtractor> = match extractor {
                ExtractorKind::Rule => Box::new(RuleExtractor),
                ExtractorKind::Endpoint => {
                    let g = generation.generator()?;
                    Box::new(GeneratorExtractor::new(move |r: &GenerationRequest| g.generate(r)))
                }
            };
            let (kg, skipped) = build_knowledge_graph(&corpus, ex.as_ref())?;
            store::save(&out, &corpus, &kg)?;
            println!(
                "{} chunks, {} triplets, {} entities, {skipped} extractor items skipped -> {}",
                corpus.len(),
                kg.triplets().len(),
                kg.entity_count(),
                out.display()
            );
        }
        Command::KgStats { dir } => {
            let st = load_store(&dir)?;
            let s = st.kg.stats();
            println!("chunks\t{}", st.corpus.len());
            println!("entities\t{}", s.entity_count);
            println!("triplets\t{}", s.triplet_count);
            println!("avg_out_degree_per_head\t{:.4}", s.avg_out_degree_per_head);
            println!("avg_in_degree_per_tail\t{:.4}", s.avg_in_degree_per_tail);
            println!("avg_degree_per_entity\t{:.4}", s.avg_degree_per_entity);
            println!("adjacency_snapshot\t{:?}", st.snapshot);
        }
        Command::Retrieve { store, query, entities, mode, backends } => {
            let st = load_store(&store)?;
            let retriever = backends.retriever(&st, &AgentConfig::default())?;
            if matches!(mode, Mode::Semantic | Mode::Hybrid) {
                for h in retriever.semantic_retrieve(&query)? {
                    println!("chunk\t{}\t{:.6}\t{}", h.item_id, h.raw_score, retriever.hit_text(&h).unwrap_or_default());
                }
            }
            if matches!(mode, Mode::Graph | Mode::Hybrid) {
                let g = retriever.graph_retrieve(&entities, &query)?;
                for e in &g.entities {
                    println!("entity\t{e}");
                }
                for h in &g.triplets {
                    println!("triplet\t{}\t{:.6}\t{}", h.item_id, h.raw_score, retriever.hit_text(h).unwrap_or_default());
                }
            }
        }
        Command::Kag { command: KagCommand::Dump { store, query, entities, dot, backends } } => {
            let st = load_store(&store)?;
            let cfg = AgentConfig::default();
            let retriever = backends.retriever(&st, &cfg)?;
            let agent = Agent::new(&retriever, &no_generation, &WhitespaceTokenizer, cfg)?;
            let ctx = agent.step_context(&entities, &query)?;
            if dot {
                print!("{}", to_dot(&ctx.graph, Some(&ctx.pi)));
            } else {
                println!("{}", serde_json::to_string_pretty(&ctx.context)?);
            }
        }
        Command::Run { store, questions, samples, out, config, generation, backends } => {
            let mut cfg: AgentConfig = match config {
                Some(p) => serde_json::from_reader(open(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => AgentConfig::default(),
            };
            cfg.samples = samples;
            let st = load_store(&store)?;
            let retriever = backends.retriever(&st, &cfg)?;
            let generator = generation.generator()?;
            let agent = Agent::new(&retriever, generator.as_ref(), &WhitespaceTokenizer, cfg)?;
            let qs: Vec<QuestionLine> = read_jsonl(&questions)?;
            let mut records = Vec::with_capacity(qs.len() * samples);
            for q in &qs {
                for (path_id, path) in agent.sample_paths(&q.question, samples).into_iter().enumerate() {
                    records.push(PathRecord { question_id: q.id.clone(), path_id, path });
                }
            }
            write_jsonl(&out, &records)?;
            println!("{} paths for {} questions -> {}", records.len(), qs.len(), out.display());
        }
        Command::Score { paths, golden, out, reranker_url, timeout_ms } => {
            let records: Vec<PathRecord> = read_jsonl(&paths)?;
            let qa: Vec<QaRecord> = read_jsonl(&golden)?;
            let scorer: Box<dyn Scorer> = match reranker_url {
                Some(url) => Box::new(EndpointScorer::new(endpoint(&url, timeout_ms))?),
                None => Box::new(LexicalReranker),
            };
            let scored = score_samples(&records, &qa, scorer.as_ref())?;
            write_jsonl(&out, &scored)?;
            println!("{} scored paths -> {}", scored.len(), out.display());
        }
        Command::Pairs { scored, out, instruction } => {
            let samples: Vec<SampleRecord> = read_jsonl(&scored)?;
            let instruction = instruction.unwrap_or_else(|| AgentConfig::default().instruction);
            let pairs = build_pairs(&samples, &instruction)?;
            write_jsonl(&out, &pairs)?;
            println!("{} pairs from {} samples -> {}", pairs.len(), samples.len(), out.display());
        }
        Command::SftBuild { decomp, seed, out, instruction } => {
            let ds: Vec<Decomposition> = read_jsonl(&decomp)?;
            let instruction = instruction.unwrap_or_else(|| AgentConfig::default().instruction);
            let records = ds
                .iter()
                .map(|d| build_sft_record(d, seed, &instruction).with_context(|| format!("record {}", d.id)))
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&out, &records)?;
            println!("{} sft records -> {}", records.len(), out.display());
        }
        Command::Eval { paths, qa, out, tokenizer, tokenizer_url } => {
            let records: Vec<PathRecord> = read_jsonl(&paths)?;
            let qa: Vec<QaRecord> = read_jsonl(&qa)?;
            let external = match tokenizer {
                TokenizerKind::Whitespace => None,
                TokenizerKind::External => {
                    let url = tokenizer_url.ok_or_else(|| anyhow!("--tokenizer external needs --tokenizer-url"))?;
                    Some(EndpointTokenizer::new(EndpointConfig::new(url))?)
                }
            };
            let tok: &dyn Tokenizer = match &external {
                Some(t) => t,
                None => &WhitespaceTokenizer,
            };
            let mut items = Vec::with_capacity(records.len());
            for r in &records {
                let q = qa
                    .iter()
                    .find(|q| q.id == r.question_id)
                    .ok_or_else(|| anyhow!("path for unknown question {:?}", r.question_id))?;
                let tokens = account_tokens(&r.path, tok).unwrap_or_else(|e| {
                    log::warn!("{}#{}: {e}; using the recorded account", r.question_id, r.path_id);
                    r.path.tokens
                });
                items.push(EvalItem { path: &r.path, truths: &q.answers, tokens });
            }
            if let Some(e) = external.as_ref().and_then(EndpointTokenizer::take_error) {
                return Err(e).context("external tokenizer");
            }
            let rep = report(&items);
            std::fs::write(&out, serde_json::to_string_pretty(&rep)?)
                .with_context(|| format!("writing {}", out.display()))?;
            print!("{}", rep.to_text());
        }
    }
    Ok(())
}
