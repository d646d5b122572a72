//! Experiment configuration, stage orchestration, evaluation and reports.
//!
//! An experiment directory holds everything a run produces:
//!
//! ```text
//! config.toml             resolved configuration
//! kb.jsonl (+ manifest)   knowledge base
//! tokenizer.json
//! index/embeddings.jsonl (+ manifest), index/bm25.json
//! policy.sft.json, policy.ppo.json
//! stats/sft.jsonl, stats/ppo.jsonl
//! predictions/<method>.jsonl, predictions/retriever-<mode>.jsonl
//! report.json, report.txt
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CodeDoc, CorpusError, KnowledgeBase, Split};
use crate::generate::{
    assemble_generator_input, EchoGenerator, GenerateError, GenerationRequest, Generator, HttpGenerator,
    TemplateStubGenerator,
};
use crate::metrics::{cosine_similarity, evaluate, levenshtein, CodeBleuWeights, MetricReport};
use crate::parser::{Parser, ParserRegistry};
use crate::refactor::{
    assemble_refactor_input, decode, load_policy_for, save_policy, sft_target, sft_train, DecodeMode,
    LinearPointerPolicy, RefactorError, SftConfig, SftExample, DEFAULT_BLOCK_SIZE,
};
use crate::retrieval::{
    hash_embed, Bm25Field, Bm25Index, Bm25Params, DenseIndex, EmbeddingProvider, HashEmbedder, RetrievalError,
    RetrievalMode, RetrievalResult, Retriever,
};
use crate::rl::{ppo_train, IterationStats, PpoConfig, PpoExample, RewardEnv, RlError};
use crate::tokenizer::{Specials, TokenId, Tokenizer};

/// Overrides the configured seed.
pub const SEED_ENV: &str = "RRG_SEED";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("experiment directory is in use (remove {} if no other run is active)", .0.display())]
    Locked(PathBuf),
    #[error("missing {what} at {}; run `{stage}` first", path.display())]
    Missing {
        what: &'static str,
        stage: &'static str,
        path: PathBuf,
    },
    #[error("corpus stage: {0}")]
    Corpus(#[from] CorpusError),
    #[error("retrieve stage: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("refactor stage: {0}")]
    Refactor(#[from] RefactorError),
    #[error("generate stage: {0}")]
    Generate(#[from] GenerateError),
    #[error("rl stage: {0}")]
    Rl(#[from] RlError),
    #[error("prediction files disagree: {0}")]
    Alignment(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
    pub lang: String,
    pub train_subset: usize,
    pub filter_syntax: bool,
    /// Cap on learned tokenizer pieces.
    pub max_pieces: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            paths: Vec::new(),
            lang: "java".into(),
            train_subset: 30_000,
            filter_syntax: true,
            max_pieces: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub mode: RetrievalMode,
    pub provider: String,
    pub dim: usize,
    pub k1: usize,
    pub k2: usize,
    pub field: Bm25Field,
    pub bm25: Bm25Params,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            mode: RetrievalMode::TwoStage,
            provider: "hash".into(),
            dim: 256,
            k1: 10,
            k2: 3,
            field: Bm25Field::Nl,
            bm25: Bm25Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefactorConfig {
    pub budget: usize,
    pub block_size: usize,
    pub global_top_m: usize,
    pub sft: SftConfig,
}

impl Default for RefactorConfig {
    fn default() -> Self {
        RefactorConfig {
            budget: 64,
            block_size: DEFAULT_BLOCK_SIZE,
            global_top_m: 32,
            sft: SftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Echo,
    Template,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub endpoint: Option<String>,
    /// Context window `W`; the refactorer budget when absent.
    pub window: Option<usize>,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
    /// Template stub: segments longer than this many tokens degrade.
    pub quality_threshold: usize,
    pub timeout_secs: f64,
    pub retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: GeneratorKind::Echo,
            endpoint: None,
            window: None,
            max_new_tokens: 256,
            stop: Vec::new(),
            temperature: 0.0,
            quality_threshold: 48,
            timeout_secs: 30.0,
            retries: 2,
        }
    }
}

/// Evaluated systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Generator with an empty (all PAD) window.
    SftBaseline,
    /// Raw retrieved code cropped to the window.
    Rag,
    /// PPO-tuned refactorer output.
    Rrg,
    /// SFT-only refactorer output.
    RrgWoRl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SftBaseline, Method::Rag, Method::Rrg, Method::RrgWoRl];

    pub fn slug(self) -> &'static str {
        match self {
            Method::SftBaseline => "sft-baseline",
            Method::Rag => "rag",
            Method::Rrg => "rrg",
            Method::RrgWoRl => "rrg-wo-rl",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::SftBaseline => "SFT-baseline",
            Method::Rag => "RAG",
            Method::Rrg => "RRG",
            Method::RrgWoRl => "RRG-w/o-RL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| PipelineError::Config(format!("unknown method `{s}` (expected sft-baseline, rag, rrg or rrg-wo-rl)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Retrievers compared in the retrieval/generation table.
    pub retrievers: Vec<RetrievalMode>,
    /// Drop a query's own document from its retrieval results.
    pub exclude_self: bool,
    pub split: Split,
    pub limit: Option<usize>,
    pub weights: CodeBleuWeights,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: Method::ALL.to_vec(),
            retrievers: RetrievalMode::ALL.to_vec(),
            exclude_self: false,
            split: Split::Test,
            limit: None,
            weights: CodeBleuWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label used in reports.
    pub name: String,
    pub seed: u64,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub retriever: RetrieverConfig,
    pub refactor: RefactorConfig,
    pub rl: PpoConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 0,
            out: PathBuf::from("runs/experiment"),
            corpus: CorpusConfig::default(),
            retriever: RetrieverConfig::default(),
            refactor: RefactorConfig::default(),
            rl: PpoConfig::default(),
            generator: GeneratorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML; relative paths are taken from `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for p in &mut cfg.corpus.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| PipelineError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// One seed feeds every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn window(&self) -> usize {
        self.generator.window.unwrap_or(self.refactor.budget)
    }

    fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: self.seed,
            ..self.refactor.sft
        }
    }

    fn ppo_config(&self) -> PpoConfig {
        PpoConfig { seed: self.seed, ..self.rl }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.corpus.paths.is_empty() {
            return bad("corpus.paths is empty".into());
        }
        for p in &self.corpus.paths {
            if !p.is_file() {
                return bad(format!("corpus file {} does not exist", p.display()));
            }
        }
        if self.retriever.provider != "hash" {
            return bad(format!("unknown embedding provider `{}` (only `hash` is built in)", self.retriever.provider));
        }
        if self.retriever.dim < 8 {
            return bad("retriever.dim must be at least 8".into());
        }
        if self.retriever.k2 == 0 || self.retriever.k2 > self.retriever.k1 {
            return bad(format!("need 1 <= k2 <= k1, got k1={} k2={}", self.retriever.k1, self.retriever.k2));
        }
        if self.refactor.budget == 0 || self.refactor.budget >= self.refactor.block_size {
            return bad("refactor.budget must be in [1, block_size)".into());
        }
        if self.window() + 2 >= self.refactor.block_size {
            return bad("generator.window leaves no room for the query".into());
        }
        if self.window() != self.refactor.budget {
            log::warn!("generator window {} differs from refactorer budget {}", self.window(), self.refactor.budget);
        }
        if self.generator.kind == GeneratorKind::Http && self.generator.endpoint.is_none() && std::env::var(crate::generate::ENDPOINT_ENV).is_err() {
            return bad("http generator needs generator.endpoint".into());
        }
        if !(self.generator.timeout_secs > 0.0) {
            return bad("generator.timeout_secs must be positive".into());
        }
        self.rl.validate()?;
        Ok(())
    }
}

/// Files of an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn kb(&self) -> PathBuf {
        self.root.join("kb.jsonl")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("index").join("embeddings.jsonl")
    }
    pub fn bm25(&self) -> PathBuf {
        self.root.join("index").join("bm25.json")
    }
    pub fn sft_policy(&self) -> PathBuf {
        self.root.join("policy.sft.json")
    }
    pub fn ppo_policy(&self) -> PathBuf {
        self.root.join("policy.ppo.json")
    }
    pub fn sft_stats(&self) -> PathBuf {
        self.root.join("stats").join("sft.jsonl")
    }
    pub fn ppo_stats(&self) -> PathBuf {
        self.root.join("stats").join("ppo.jsonl")
    }
    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{name}.jsonl"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    fn require(&self, path: PathBuf, what: &'static str, stage: &'static str) -> Result<PathBuf, PipelineError> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::Missing { what, stage, path })
        }
    }
}

/// Exclusive ownership of an experiment directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(layout: &Layout) -> Result<Self, PipelineError> {
        fs::create_dir_all(&layout.root).map_err(io_err(&layout.root))?;
        let path = layout.lock();
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut body = String::new();
    for it in items {
        body.push_str(&serde_json::to_string(it).expect("record serializes"));
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub docs: usize,
    pub skipped: usize,
    pub duplicates: usize,
    pub syntax_rejected: usize,
    pub vocab_size: usize,
}

/// Read the corpus files, merge splits, filter, and write the knowledge
/// base, tokenizer and resolved config.
pub fn ingest_stage(cfg: &ExperimentConfig) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    let _lock = DirLock::acquire(&layout)?;
    let mut docs: Vec<CodeDoc> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let (mut skipped, mut duplicates) = (0, 0);
    for p in &cfg.corpus.paths {
        let got = corpus::ingest(p, &cfg.corpus.lang)?;
        skipped += got.skipped;
        duplicates += got.duplicates;
        for d in got.docs {
            if seen.insert(d.id.clone()) {
                docs.push(d);
            } else {
                log::warn!("{}: duplicate id {} across files, keeping the first", p.display(), d.id);
                duplicates += 1;
            }
        }
    }
    let before = docs.len();
    if cfg.corpus.filter_syntax {
        docs = corpus::filter_syntax(docs, &ParserRegistry::builtin())?;
    }
    let syntax_rejected = before - docs.len();
    let kb = KnowledgeBase::new(&cfg.corpus.lang, docs)?;
    kb.save(&layout.kb())?;
    let texts: Vec<&str> = kb.docs().iter().flat_map(|d| [d.nl.as_str(), d.code.as_str()]).collect();
    let tok = Tokenizer::train(texts, cfg.corpus.max_pieces);
    write_file(&layout.tokenizer(), &(serde_json::to_string(&tok).expect("tokenizer serializes") + "\n"))?;
    let cfg_text = toml::to_string(cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
    write_file(&layout.config(), &cfg_text)?;
    log::info!("ingested {} docs ({} skipped, {} duplicates, {} rejected by syntax)", kb.len(), skipped, duplicates, syntax_rejected);
    Ok(IngestSummary {
        docs: kb.len(),
        skipped,
        duplicates,
        syntax_rejected,
        vocab_size: tok.vocab_size(),
    })
}

fn provider(cfg: &ExperimentConfig) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
    match cfg.retriever.provider.as_str() {
        "hash" => Ok(Box::new(HashEmbedder::new(cfg.retriever.dim)?)),
        other => Err(PipelineError::Config(format!("unknown embedding provider `{other}`"))),
    }
}

/// Build and persist the dense and BM25 indexes.
pub fn index_stage(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let layout = Layout::new(&cfg.out);
    let _lock = DirLock::acquire(&layout)?;
    let kb = KnowledgeBase::load(&layout.require(layout.kb(), "knowledge base", "ingest")?)?;
    let provider = provider(cfg)?;
    let dense = DenseIndex::build(&kb, provider.as_ref());
    let bm25 = Bm25Index::build(&kb, cfg.retriever.field, cfg.retriever.bm25);
    let dir = layout.root.join("index");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    dense.save(&layout.embeddings())?;
    bm25.save(&layout.bm25())?;
    log::info!("indexed {} docs", kb.len());
    Ok(())
}

fn build_generator(cfg: &ExperimentConfig, tok: &Arc<Tokenizer>) -> Box<dyn Generator> {
    let g = &cfg.generator;
    match g.kind {
        GeneratorKind::Echo => Box::new(EchoGenerator::new(tok.clone())),
        GeneratorKind::Template => Box::new(TemplateStubGenerator::new(tok.clone(), g.quality_threshold)),
        GeneratorKind::Http => Box::new(HttpGenerator::new(
            g.endpoint.as_deref().unwrap_or_default(),
            Duration::from_secs_f64(g.timeout_secs),
            g.retries,
        )),
    }
}

/// Loaded artifacts shared by the training and evaluation stages.
pub struct Runtime {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub kb: KnowledgeBase,
    pub tokenizer: Arc<Tokenizer>,
    pub retriever: Retriever,
    pub generator: Box<dyn Generator>,
    pub parsers: ParserRegistry,
}

impl Runtime {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        let layout = Layout::new(&cfg.out);
        let kb = KnowledgeBase::load(&layout.require(layout.kb(), "knowledge base", "ingest")?)?;
        let tok_path = layout.require(layout.tokenizer(), "tokenizer", "ingest")?;
        let tok_text = fs::read_to_string(&tok_path).map_err(io_err(&tok_path))?;
        let tokenizer: Tokenizer = serde_json::from_str(&tok_text).map_err(|e| PipelineError::Corrupt {
            path: tok_path.clone(),
            message: e.to_string(),
        })?;
        let provider = provider(cfg)?;
        let dense = DenseIndex::load(&layout.require(layout.embeddings(), "dense index", "index")?)?;
        if dense.fingerprint() != provider.fingerprint() {
            return Err(RetrievalError::StaleIndex {
                built: dense.fingerprint().to_string(),
                current: provider.fingerprint(),
            }
            .into());
        }
        let bm25 = Bm25Index::load(&layout.require(layout.bm25(), "BM25 index", "index")?)?;
        let retriever = Retriever {
            provider,
            dense,
            bm25,
            mode: cfg.retriever.mode,
            k1: cfg.retriever.k1,
            k2: cfg.retriever.k2,
        };
        let tokenizer = Arc::new(tokenizer);
        Ok(Runtime {
            generator: build_generator(cfg, &tokenizer),
            cfg: cfg.clone(),
            layout,
            kb,
            tokenizer,
            retriever,
            parsers: ParserRegistry::builtin(),
        })
    }

    pub fn parser(&self) -> Option<Arc<dyn Parser>> {
        self.parsers.get(self.kb.lang())
    }

    pub fn reward_env<'a>(&'a self, parser: Option<&'a dyn Parser>) -> RewardEnv<'a> {
        let g = &self.cfg.generator;
        RewardEnv {
            tokenizer: &self.tokenizer,
            generator: self.generator.as_ref(),
            parser,
            weights: self.cfg.eval.weights,
            budget: self.cfg.refactor.budget,
            window: self.cfg.window(),
            block_size: self.cfg.refactor.block_size,
            max_new_tokens: g.max_new_tokens,
            stop: g.stop.clone(),
            temperature: g.temperature,
        }
    }

    /// Retrieval states for the sampled training subset. A training query
    /// never retrieves its own document.
    pub fn training_examples(&self) -> Result<Vec<PpoExample>, PipelineError> {
        let train: Vec<CodeDoc> = self.kb.split(Split::Train).cloned().collect();
        if train.is_empty() {
            return Err(CorpusError::EmptyCorpus("no train split documents".into()).into());
        }
        let sample = corpus::sample_training(&train, self.cfg.corpus.train_subset, self.cfg.seed);
        self.examples_for(&sample.iter().collect::<Vec<_>>(), true)
    }

    /// Frozen retrieval states for `docs`, queried by their NL.
    pub fn examples_for(&self, docs: &[&CodeDoc], exclude_self: bool) -> Result<Vec<PpoExample>, PipelineError> {
        docs.par_iter()
            .map(|d| {
                let results = self.retriever.retrieve(&d.nl, exclude_self.then_some(d.id.as_str()))?;
                let state = assemble_refactor_input(&self.tokenizer, &d.nl, &results, &self.kb, self.cfg.refactor.block_size)?;
                Ok(PpoExample {
                    id: d.id.clone(),
                    query: d.nl.clone(),
                    state,
                    reference: d.code.clone(),
                })
            })
            .collect()
    }

    pub fn new_policy(&self) -> LinearPointerPolicy {
        LinearPointerPolicy::for_tokenizer(
            &self.tokenizer,
            self.cfg.retriever.k2,
            self.cfg.refactor.budget,
            self.cfg.refactor.global_top_m,
        )
    }

    pub fn load_policy(&self, path: &Path, stage: &'static str) -> Result<LinearPointerPolicy, PipelineError> {
        let path = self.layout.require(path.to_path_buf(), "policy", stage)?;
        Ok(load_policy_for(&path, &self.tokenizer)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStatsLine {
    pub epoch: usize,
    pub loss: f64,
}

/// Stage 1: teacher-forced training toward the ground-truth code.
pub fn train_sft_stage(cfg: &ExperimentConfig) -> Result<crate::refactor::SftReport, PipelineError> {
    let rt = Runtime::load(cfg)?;
    let _lock = DirLock::acquire(&rt.layout)?;
    let examples = rt.training_examples()?;
    let data: Vec<SftExample> = examples
        .iter()
        .map(|e| SftExample {
            state: e.state.clone(),
            target: sft_target(&rt.tokenizer.tokenize(&e.reference), cfg.refactor.budget),
        })
        .collect();
    let mut policy = rt.new_policy();
    let report = sft_train(&mut policy, &data, &cfg.sft_config())?;
    let mut lines = vec![SftStatsLine {
        epoch: 0,
        loss: report.initial_loss,
    }];
    lines.extend(report.epoch_losses.iter().enumerate().map(|(i, &loss)| SftStatsLine { epoch: i + 1, loss }));
    write_jsonl(&rt.layout.sft_stats(), &lines)?;
    let checkpoint = serde_json::json!({
        "sft_config": cfg.sft_config(),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
    });
    save_policy(&policy, &rt.layout.sft_policy(), Some(checkpoint))?;
    Ok(report)
}

/// Stage 2: PPO against the frozen SFT policy with the generator as reward.
pub fn train_ppo_stage(cfg: &ExperimentConfig) -> Result<Vec<IterationStats>, PipelineError> {
    let rt = Runtime::load(cfg)?;
    let _lock = DirLock::acquire(&rt.layout)?;
    let reference = rt.load_policy(&rt.layout.sft_policy(), "train-sft")?;
    let examples = rt.training_examples()?;
    let parser = rt.parser();
    let env = rt.reward_env(parser.as_deref());
    let mut policy = reference.clone();
    let ppo = cfg.ppo_config();
    let stats = ppo_train(&mut policy, &reference, &env, &examples, &ppo, |_, _| {})?;
    write_jsonl(&rt.layout.ppo_stats(), &stats)?;
    let checkpoint = serde_json::json!({
        "ppo_config": ppo,
        "iteration": stats.last().map_or(0, |s| s.iteration),
    });
    save_policy(&policy, &rt.layout.ppo_policy(), Some(checkpoint))?;
    Ok(stats)
}

/// Every intermediate of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub retrieved: Vec<RetrievalResult>,
    /// Refactorer output; absent for RAG and the baseline.
    pub refactored: Option<String>,
    /// The `W` tokens shown to the generator.
    pub relevant: Vec<TokenId>,
    pub generated: String,
}

/// Retrieve, optionally refactor, and generate for one query.
pub fn run_pipeline(
    rt: &Runtime,
    query: &str,
    method: Method,
    policy: Option<&LinearPointerPolicy>,
    mode: RetrievalMode,
    exclude: Option<&str>,
) -> Result<PipelineOutput, PipelineError> {
    let cfg = &rt.cfg;
    let q = rt.tokenizer.tokenize(query);
    let (retrieved, refactored, relevant) = match method {
        Method::SftBaseline => (Vec::new(), None, Vec::new()),
        Method::Rag => {
            let retrieved = rt.retriever.retrieve_as(mode, query, exclude)?;
            let mut rel = Vec::new();
            for (i, r) in retrieved.iter().enumerate() {
                let doc = rt.kb.get(&r.doc_id).ok_or_else(|| RetrievalError::UnknownDoc(r.doc_id.clone()))?;
                if i > 0 {
                    rel.push(Specials::CODE_SEP);
                }
                rel.extend(rt.tokenizer.tokenize(&doc.code));
                if rel.len() >= cfg.window() {
                    break;
                }
            }
            (retrieved, None, rel)
        }
        Method::Rrg | Method::RrgWoRl => {
            let policy = policy.ok_or_else(|| PipelineError::Config(format!("{} needs a policy", method.label())))?;
            let retrieved = rt.retriever.retrieve_as(mode, query, exclude)?;
            let state = assemble_refactor_input(&rt.tokenizer, query, &retrieved, &rt.kb, cfg.refactor.block_size)?;
            let action = decode(policy, &state, cfg.refactor.budget, DecodeMode::Greedy, cfg.seed)?;
            let body = action.body().to_vec();
            let text = rt
                .tokenizer
                .detokenize_plain(&body)
                .map_err(|e| GenerateError::Render(e.to_string()))?;
            (retrieved, Some(text), body)
        }
    };
    let ctx = assemble_generator_input(&q, &relevant, cfg.window(), cfg.refactor.block_size)?;
    let g = &cfg.generator;
    let req = GenerationRequest::new(ctx, &rt.tokenizer, g.max_new_tokens, g.stop.clone(), g.temperature)?;
    let relevant = req.context.relevant.clone();
    let generated = rt.generator.generate(&req)?;
    Ok(PipelineOutput {
        retrieved,
        refactored,
        relevant,
        generated,
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub query: String,
    pub retrieved_ids: Vec<String>,
    pub refactored: Option<String>,
    pub generated: String,
    pub reference: String,
    /// Top-ranked retrieved code (retriever comparison files).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1_code: Option<String>,
    /// Embedding cosine of `top1_code` against the reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1_cos: Option<f64>,
}

/// Evaluation documents in id order.
pub fn eval_docs(rt: &Runtime) -> Vec<&CodeDoc> {
    let docs: Vec<&CodeDoc> = rt.kb.split(rt.cfg.eval.split).collect();
    match rt.cfg.eval.limit {
        Some(n) => docs.into_iter().take(n).collect(),
        None => docs,
    }
}

/// Run `method` over `docs`.
pub fn predict(
    rt: &Runtime,
    method: Method,
    mode: RetrievalMode,
    policy: Option<&LinearPointerPolicy>,
    docs: &[&CodeDoc],
    with_retrieval_columns: bool,
) -> Result<Vec<Prediction>, PipelineError> {
    let exclude_self = rt.cfg.eval.exclude_self;
    docs.par_iter()
        .map(|d| {
            let out = run_pipeline(rt, &d.nl, method, policy, mode, exclude_self.then_some(d.id.as_str()))?;
            let (top1_code, top1_cos) = match (with_retrieval_columns, out.retrieved.first()) {
                (true, Some(r)) => {
                    let code = rt.kb.get(&r.doc_id).map(|x| x.code.clone()).unwrap_or_default();
                    let dim = rt.retriever.provider.dim();
                    let cos = cosine_similarity(&hash_embed(&code, dim), &hash_embed(&d.code, dim)).unwrap_or(0.0);
                    (Some(code), Some(cos))
                }
                _ => (None, None),
            };
            Ok(Prediction {
                id: d.id.clone(),
                query: d.nl.clone(),
                retrieved_ids: out.retrieved.iter().map(|r| r.doc_id.clone()).collect(),
                refactored: out.refactored,
                generated: out.generated,
                reference: d.code.clone(),
                top1_code,
                top1_cos,
            })
        })
        .collect()
}

fn retriever_file(mode: RetrievalMode) -> String {
    format!("retriever-{}", mode.name())
}

/// Write prediction files for `methods` and the configured retriever
/// comparison.
pub fn generate_stage(cfg: &ExperimentConfig, methods: &[Method]) -> Result<(), PipelineError> {
    let rt = Runtime::load(cfg)?;
    let _lock = DirLock::acquire(&rt.layout)?;
    let docs = eval_docs(&rt);
    if docs.is_empty() {
        return Err(PipelineError::Config(format!("no documents in the {:?} split", cfg.eval.split)));
    }
    for &m in methods {
        let policy = match m {
            Method::Rrg => Some(rt.load_policy(&rt.layout.ppo_policy(), "train-ppo")?),
            Method::RrgWoRl => Some(rt.load_policy(&rt.layout.sft_policy(), "train-sft")?),
            _ => None,
        };
        let preds = predict(&rt, m, cfg.retriever.mode, policy.as_ref(), &docs, false)?;
        write_jsonl(&rt.layout.predictions(m.slug()), &preds)?;
    }
    for &mode in &cfg.eval.retrievers {
        let preds = predict(&rt, Method::Rag, mode, None, &docs, true)?;
        write_jsonl(&rt.layout.predictions(&retriever_file(mode)), &preds)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub dataset: String,
    pub em: f64,
    pub bleu: f64,
    pub codebleu: f64,
    pub n: usize,
    pub metrics: MetricReport,
}

/// Retrieval quality next to downstream generation quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverRow {
    pub retriever: String,
    /// Mean character edit distance of the top-1 code to the reference.
    pub ls: f64,
    pub cos: f64,
    pub em: f64,
    pub bleu: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub generator: String,
    pub rows: Vec<EvalRow>,
    pub retrievers: Vec<RetrieverRow>,
}

fn id_set(preds: &[Prediction]) -> Vec<&str> {
    let mut ids: Vec<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    ids
}

/// The report is a pure function of the prediction sets.
pub fn build_report(
    dataset: &str,
    generator: &str,
    methods: &[(String, Vec<Prediction>)],
    retrievers: &[(String, Vec<Prediction>)],
    parser: Option<&dyn Parser>,
    weights: &CodeBleuWeights,
) -> Result<Report, PipelineError> {
    let all: Vec<&(String, Vec<Prediction>)> = methods.iter().chain(retrievers).collect();
    if let Some((first_name, first)) = all.first().map(|x| (&x.0, &x.1)) {
        let ids = id_set(first);
        for (name, preds) in &all[1..] {
            if id_set(preds) != ids {
                return Err(PipelineError::Alignment(format!("{name} and {first_name} cover different ids")));
            }
        }
    }
    let pairs = |preds: &[Prediction]| -> Vec<(String, String)> {
        preds.iter().map(|p| (p.generated.clone(), p.reference.clone())).collect()
    };
    let rows = methods
        .iter()
        .map(|(name, preds)| {
            let m = evaluate(&pairs(preds), parser, weights);
            EvalRow {
                method: name.clone(),
                dataset: dataset.to_string(),
                em: m.em,
                bleu: m.bleu,
                codebleu: m.codebleu,
                n: m.n,
                metrics: m,
            }
        })
        .collect();
    let retrievers = retrievers
        .iter()
        .map(|(name, preds)| {
            let n = preds.len().max(1) as f64;
            let ls = preds
                .iter()
                .map(|p| levenshtein(p.top1_code.as_deref().unwrap_or(""), &p.reference) as f64)
                .sum::<f64>()
                / n;
            let cos = preds.iter().map(|p| p.top1_cos.unwrap_or(0.0)).sum::<f64>() / n;
            let m = evaluate(&pairs(preds), parser, weights);
            RetrieverRow {
                retriever: name.clone(),
                ls,
                cos,
                em: m.em,
                bleu: m.bleu,
                n: preds.len(),
            }
        })
        .collect();
    Ok(Report {
        dataset: dataset.to_string(),
        generator: generator.to_string(),
        rows,
        retrievers,
    })
}

/// Plain-text tables; EM, BLEU and CodeBLEU are scaled by 100.
pub fn render_report(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Generation ({}, generator: {})", r.dataset, r.generator);
    let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>9} {:>6}", "Method", "EM", "BLEU", "CodeBLEU", "n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>8.2} {:>9.2} {:>6}",
            row.method,
            row.em * 100.0,
            row.bleu * 100.0,
            row.codebleu * 100.0,
            row.n
        );
    }
    if !r.retrievers.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Retrieval vs generation ({})", r.dataset);
        let _ = writeln!(s, "{:<10} | {:>9} {:>6} | {:>8} {:>8}", "Retriever", "LS", "Cos", "EM", "BLEU");
        for row in &r.retrievers {
            let _ = writeln!(
                s,
                "{:<10} | {:>9.2} {:>6.2} | {:>8.2} {:>8.2}",
                row.retriever,
                row.ls,
                row.cos,
                row.em * 100.0,
                row.bleu * 100.0
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Stub-generator rows are desk-scale analogues, not fine-tuned model results.");
    s
}

/// Recompute the report from the prediction files on disk.
pub fn report_stage(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Report, PipelineError> {
    let layout = Layout::new(&cfg.out);
    let load = |name: String, label: String| -> Result<(String, Vec<Prediction>), PipelineError> {
        let path = layout.require(layout.predictions(&name), "predictions", "generate")?;
        Ok((label, read_jsonl(&path)?))
    };
    let method_preds = methods
        .iter()
        .map(|m| load(m.slug().to_string(), m.label().to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let retr_preds = cfg
        .eval
        .retrievers
        .iter()
        .map(|&r| load(retriever_file(r), r.name().to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let parsers = ParserRegistry::builtin();
    let parser = parsers.get(&cfg.corpus.lang);
    let generator = serde_json::to_value(cfg.generator.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let report = build_report(&cfg.name, &generator, &method_preds, &retr_preds, parser.as_deref(), &cfg.eval.weights)?;
    let _lock = DirLock::acquire(&layout)?;
    write_file(
        &layout.report_json(),
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    write_file(&layout.report_txt(), &render_report(&report))?;
    Ok(report)
}

/// Predictions followed by the report.
pub fn eval_stage(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Report, PipelineError> {
    generate_stage(cfg, methods)?;
    report_stage(cfg, methods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_follow_the_settings() {
        let cfg = ExperimentConfig::from_toml("", Path::new("/base")).unwrap();
        assert_eq!((cfg.retriever.k1, cfg.retriever.k2), (10, 3));
        assert_eq!(cfg.refactor.block_size, 512);
        assert_eq!(cfg.rl.beta, 0.5);
        assert_eq!((cfg.refactor.sft.epochs, cfg.refactor.sft.batch), (10, 16));
        assert_eq!(cfg.window(), cfg.refactor.budget);
        assert_eq!(cfg.out, Path::new("/base/runs/experiment"));
    }

    #[test]
    fn config_parses_sections_and_rejects_typos() {
        let text = r#"
            seed = 7
            [corpus]
            paths = ["data/a.jsonl"]
            lang = "python"
            [retriever]
            mode = "bm25"
            [retriever.bm25]
            k1 = 1.5
            b = 0.5
            [generator]
            kind = "template"
            window = 32
            [eval]
            methods = ["rag", "rrg-wo-rl"]
            retrievers = ["dense", "two-stage"]
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new("/x")).unwrap();
        assert_eq!(cfg.corpus.paths, vec![PathBuf::from("/x/data/a.jsonl")]);
        assert_eq!(cfg.retriever.mode, RetrievalMode::Bm25);
        assert_eq!(cfg.retriever.bm25.k1, 1.5);
        assert_eq!(cfg.generator.kind, GeneratorKind::Template);
        assert_eq!(cfg.window(), 32);
        assert_eq!(cfg.eval.methods, vec![Method::Rag, Method::RrgWoRl]);
        assert!(ExperimentConfig::from_toml("[retriever]\nkk = 3", Path::new(".")).is_err());
        let back: ExperimentConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.slug().parse::<Method>().unwrap(), m);
        }
        assert!("rrg2".parse::<Method>().is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let a = DirLock::acquire(&layout).unwrap();
        assert!(matches!(DirLock::acquire(&layout), Err(PipelineError::Locked(_))));
        drop(a);
        assert!(DirLock::acquire(&layout).is_ok());
    }

    fn pred(id: &str, generated: &str, reference: &str) -> Prediction {
        Prediction {
            id: id.into(),
            query: String::new(),
            retrieved_ids: vec![],
            refactored: None,
            generated: generated.into(),
            reference: reference.into(),
            top1_code: Some(generated.into()),
            top1_cos: Some(1.0),
        }
    }

    #[test]
    fn identical_predictions_score_100() {
        let preds = vec![
            pred("a", "int f ( ) { return 1 ; }", "int f ( ) { return 1 ; }"),
            pred("b", "void g ( int x ) { x = x + 1 ; }", "void g ( int x ) { x = x + 1 ; }"),
        ];
        let parsers = ParserRegistry::builtin();
        let r = build_report(
            "d",
            "echo",
            &[("RAG".into(), preds.clone())],
            &[("dense".into(), preds)],
            parsers.get("java").as_deref(),
            &CodeBleuWeights::default(),
        )
        .unwrap();
        let text = render_report(&r);
        let rag = text.lines().find(|l| l.starts_with("RAG")).unwrap();
        assert_eq!(rag.matches("100.00").count(), 3, "{text}");
        assert_eq!(r.retrievers[0].ls, 0.0);
    }

    #[test]
    fn misaligned_ids_are_rejected() {
        let a = vec![pred("a", "x", "x")];
        let b = vec![pred("b", "x", "x")];
        let err = build_report("d", "echo", &[("A".into(), a), ("B".into(), b)], &[], None, &CodeBleuWeights::default());
        assert!(matches!(err, Err(PipelineError::Alignment(_))));
    }
}
