use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rrg::metrics::{codebleu, evaluate, exact_match, CodeBleuWeights};
use rrg::parser::ParserRegistry;
use rrg::pipeline::{
    eval_stage, generate_stage, index_stage, ingest_stage, render_report, report_stage, run_pipeline, train_ppo_stage,
    train_sft_stage, ExperimentConfig, Method, Runtime,
};
use rrg::retrieval::RetrievalMode;

#[derive(Parser)]
#[command(name = "rrg", version, about = "Retrieve, refactor and generate code from natural language")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the experiment directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the knowledge base and tokenizer from the corpus files.
    Ingest(Common),
    /// Embed the knowledge base and build the BM25 index.
    Index(Common),
    /// Print ranked documents for a query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query: String,
        /// dense, bm25 or two-stage (default: config).
        #[arg(long)]
        mode: Option<RetrievalMode>,
    },
    /// Stage 1: teacher-forced refactorer training.
    TrainSft(Common),
    /// Stage 2: PPO against the generator reward.
    TrainPpo(Common),
    /// Write prediction files, or run one query with --query.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        query: Option<String>,
    },
    /// Generate predictions and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Recompute the report from existing prediction files.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Score a JSONL file of {id, prediction, reference}.
    Score {
        input: PathBuf,
        #[arg(long, default_value = "java")]
        lang: String,
        /// Also write per-sample scores here.
        #[arg(long)]
        per_sample: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
struct ScoreLine {
    id: String,
    prediction: String,
    reference: String,
}

#[derive(Serialize)]
struct SampleScore<'a> {
    id: &'a str,
    em: bool,
    bleu: f64,
    codebleu: f64,
}

fn methods_or(m: Option<Vec<Method>>, cfg: &ExperimentConfig) -> Vec<Method> {
    m.unwrap_or_else(|| cfg.eval.methods.clone())
}

fn run(cmd: Cmd) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cmd {
        Cmd::Ingest(c) => {
            let s = ingest_stage(&c.load()?)?;
            writeln!(
                stdout,
                "{} docs ({} skipped, {} duplicates, {} failed to parse), vocabulary {}",
                s.docs, s.skipped, s.duplicates, s.syntax_rejected, s.vocab_size
            )?;
        }
        Cmd::Index(c) => {
            let cfg = c.load()?;
            index_stage(&cfg)?;
            writeln!(stdout, "indexed {}", cfg.out.display())?;
        }
        Cmd::Retrieve { common, query, mode } => {
            let rt = Runtime::load(&common.load()?)?;
            let mode = mode.unwrap_or(rt.retriever.mode);
            writeln!(stdout, "rank\tid\tdense\tbm25")?;
            for r in rt.retriever.retrieve_as(mode, &query, None)? {
                writeln!(stdout, "{}\t{}\t{:.6}\t{:.6}", r.rank, r.doc_id, r.dense_score, r.bm25_score)?;
            }
        }
        Cmd::TrainSft(c) => {
            let r = train_sft_stage(&c.load()?)?;
            writeln!(stdout, "sft loss {:.6} -> {:.6}", r.initial_loss, r.final_loss)?;
        }
        Cmd::TrainPpo(c) => {
            let stats = train_ppo_stage(&c.load()?)?;
            if let (Some(a), Some(b)) = (stats.first(), stats.last()) {
                writeln!(
                    stdout,
                    "{} iterations, reward {:.4} -> {:.4}",
                    stats.len(),
                    a.mean_reward,
                    b.mean_reward
                )?;
            }
        }
        Cmd::Generate { common, methods, query } => {
            let cfg = common.load()?;
            match query {
                Some(q) => {
                    let ms = methods_or(methods, &cfg);
                    let rt = Runtime::load(&cfg)?;
                    for m in ms {
                        let policy = match m {
                            Method::Rrg => Some(rt.load_policy(&rt.layout.ppo_policy(), "train-ppo")?),
                            Method::RrgWoRl => Some(rt.load_policy(&rt.layout.sft_policy(), "train-sft")?),
                            _ => None,
                        };
                        let out = run_pipeline(&rt, &q, m, policy.as_ref(), cfg.retriever.mode, None)?;
                        let line = serde_json::json!({ "method": m.slug(), "output": out });
                        writeln!(stdout, "{line}")?;
                    }
                }
                None => {
                    generate_stage(&cfg, &methods_or(methods, &cfg))?;
                    writeln!(stdout, "predictions in {}", cfg.out.join("predictions").display())?;
                }
            }
        }
        Cmd::Eval { common, methods } => {
            let cfg = common.load()?;
            let r = eval_stage(&cfg, &methods_or(methods, &cfg))?;
            write!(stdout, "{}", render_report(&r))?;
        }
        Cmd::Report { common, methods } => {
            let cfg = common.load()?;
            let r = report_stage(&cfg, &methods_or(methods, &cfg))?;
            write!(stdout, "{}", render_report(&r))?;
        }
        Cmd::Score { input, lang, per_sample } => {
            let f = File::open(&input).with_context(|| input.display().to_string())?;
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: ScoreLine =
                    serde_json::from_str(&line).with_context(|| format!("{}:{}", input.display(), i + 1))?;
                rows.push(r);
            }
            let parsers = ParserRegistry::builtin();
            let Some(parser) = parsers.get(&lang) else {
                bail!("no parser for language `{lang}`");
            };
            let weights = CodeBleuWeights::default();
            let pairs: Vec<(String, String)> = rows.iter().map(|r| (r.prediction.clone(), r.reference.clone())).collect();
            let report = evaluate(&pairs, Some(parser.as_ref()), &weights);
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
            if let Some(path) = per_sample {
                let mut w = std::io::BufWriter::new(File::create(&path).with_context(|| path.display().to_string())?);
                for r in &rows {
                    let cb = codebleu(&r.prediction, &r.reference, Some(parser.as_ref()), &weights);
                    let s = SampleScore {
                        id: &r.id,
                        em: exact_match(&r.prediction, &r.reference),
                        bleu: cb.components.ngram,
                        codebleu: cb.score,
                    };
                    writeln!(w, "{}", serde_json::to_string(&s)?)?;
                }
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
