//! End-to-end acceptance checks. Each test prints one verdict line to
//! stderr whether or not output capture is on.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rrg::corpus::{ingest, KnowledgeBase};
use rrg::metrics::{bleu, codebleu, levenshtein, CodeBleuWeights};
use rrg::parser::ParserRegistry;
use rrg::pipeline::*;
use rrg::refactor::{
    decode, sequence_logprob, sft_loss_and_grad, sft_target, DecodeMode, LinearPointerPolicy, SftExample,
    TrainablePolicy,
};
use rrg::retrieval::{hash_embed, Bm25Field, Bm25Index, Bm25Params, DenseIndex, HashEmbedder, RetrievalMode, Retriever};
use rrg::rl::{
    compute_reward, evaluate_reward, gae, ppo_loss, ppo_train, reward_from_parts, PpoConfig, RewardSummary, Trajectory,
};
use rrg::tokenizer::{lex_terms, Tokenizer};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn verdict(n: u32, what: &str, ok: bool, detail: &str, elapsed: Duration) -> bool {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr().lock(),
        "[{tag}] criterion {n}: {what} ({detail}; {:.2}s)",
        elapsed.as_secs_f64()
    );
    ok
}

fn config(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&fixture(name)).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// Ingest, index and both training stages.
fn train_all(cfg: &ExperimentConfig) -> (rrg::refactor::SftReport, Vec<rrg::rl::IterationStats>) {
    ingest_stage(cfg).unwrap();
    index_stage(cfg).unwrap();
    let sft = train_sft_stage(cfg).unwrap();
    let ppo = train_ppo_stage(cfg).unwrap();
    (sft, ppo)
}

fn levenshtein_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn criterion_1_metric_oracles() {
    let t = Instant::now();
    let reg = ParserRegistry::builtin();
    let w = CodeBleuWeights::default();
    let mut worst: f64 = 0.0;
    for (lang, code) in rrg::synth::parseable_snippets() {
        let toks = lex_terms(code);
        worst = worst.max((bleu(&toks, &toks, 4) - 1.0).abs());
        let parser = reg.get(lang).unwrap();
        let cb = codebleu(code, code, Some(parser.as_ref()), &w);
        worst = worst.max((cb.score - 1.0).abs());
    }
    let lev = levenshtein("kitten", "sitting");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alphabet: Vec<char> = "abc xyz(){};".chars().collect();
    let rand_str = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..12);
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut lev_ok = lev == 3 && levenshtein_oracle("kitten", "sitting") == 3;
    for _ in 0..200 {
        let (a, b) = (rand_str(&mut rng), rand_str(&mut rng));
        lev_ok &= levenshtein(&a, &b) == levenshtein_oracle(&a, &b);
    }

    let kb = KnowledgeBase::new("java", ingest(&fixture("bm25.jsonl"), "java").unwrap().docs).unwrap();
    let idx = Bm25Index::build(&kb, Bm25Field::Nl, Bm25Params::default());
    let docs: Vec<(String, Vec<String>)> = kb
        .docs()
        .iter()
        .map(|d| (d.id.clone(), d.nl.to_lowercase().split_whitespace().map(str::to_string).collect()))
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.1.len() as f64).sum::<f64>() / n;
    let (k1, b) = (1.2, 0.75);
    let mut bm25_err: f64 = 0.0;
    for query in ["add numbers", "sort list", "add two numbers to a list", "list list"] {
        let q: Vec<String> = query.split_whitespace().map(str::to_string).collect();
        for (id, toks) in &docs {
            let mut expect = 0.0;
            for term in &q {
                let df = docs.iter().filter(|d| d.1.contains(term)).count() as f64;
                let tf = toks.iter().filter(|x| *x == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                expect += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * toks.len() as f64 / avgdl));
            }
            bm25_err = bm25_err.max((idx.score(&q, id).unwrap() - expect).abs());
        }
    }
    let el = t.elapsed();
    let ok = worst < 1e-12 && lev_ok && bm25_err < 1e-9 && el < Duration::from_secs(5);
    let detail = format!("self-score error {worst:.1e}, levenshtein {lev}, bm25 error {bm25_err:.1e}");
    assert!(verdict(1, "metric oracles", ok, &detail, el));
}

#[test]
fn criterion_2_retrieval_equivalence() {
    let t = Instant::now();
    let kb = KnowledgeBase::new("java", ingest(&fixture("retrieval_1000.jsonl"), "java").unwrap().docs).unwrap();
    let queries: Vec<String> = std::fs::read_to_string(fixture("retrieval_queries.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    assert_eq!((kb.len(), queries.len()), (1000, 50));
    let dim = 256;
    let provider = HashEmbedder::new(dim).unwrap();
    let dense = DenseIndex::build(&kb, &provider);
    let doc_vecs: Vec<(String, Vec<f64>)> = kb.docs().iter().map(|d| (d.id.clone(), hash_embed(&d.nl, dim))).collect();
    let retriever = Retriever::build(&kb, Box::new(provider), Bm25Field::Nl, Bm25Params::default()).with_k(10, 3);
    let mut top_ok = 0;
    let mut subset_ok = 0;
    for q in &queries {
        let qv = hash_embed(q, dim);
        let mut all: Vec<(f64, &str)> = doc_vecs
            .iter()
            .map(|(id, v)| (v.iter().zip(&qv).map(|(a, b)| a * b).sum::<f64>(), id.as_str()))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let brute: Vec<&str> = all.iter().take(10).map(|x| x.1).collect();
        let got = dense.search(&HashEmbedder::new(dim).unwrap(), q, 10, None).unwrap();
        if got.iter().map(|r| r.doc_id.as_str()).eq(brute.iter().copied()) {
            top_ok += 1;
        }
        let two = retriever.retrieve_as(RetrievalMode::TwoStage, q, None).unwrap();
        if two.len() == 3 && two.iter().all(|r| brute.contains(&r.doc_id.as_str())) {
            subset_ok += 1;
        }
    }
    let el = t.elapsed();
    let ok = top_ok == 50 && subset_ok == 50 && el < Duration::from_secs(10);
    let detail = format!("top-10 equal {top_ok}/50, two-stage subset of stage 1 with 3 results {subset_ok}/50");
    assert!(verdict(2, "retrieval equivalence", ok, &detail, el));
}

fn gae_oracle(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
    let delta: Vec<f64> = (0..r.len()).map(|t| r[t] + g * v[t + 1] - v[t]).collect();
    (0..r.len())
        .map(|t| (t..r.len()).map(|k| (g * l).powi((k - t) as i32) * delta[k]).sum())
        .collect()
}

fn rel_err(fd: f64, an: f64) -> f64 {
    let err = (fd - an).abs();
    if err < 1e-9 {
        0.0
    } else {
        err / fd.abs().max(an.abs())
    }
}

/// Small trained-corpus setting shared by the gradient and pin checks.
struct Arith {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
}

fn arith_prepared() -> Arith {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("arith.toml", dir.path());
    ingest_stage(&cfg).unwrap();
    index_stage(&cfg).unwrap();
    Arith { _dir: dir, cfg }
}

#[test]
fn criterion_3_numeric_rl_checks() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gae_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (g, l) = (rng.gen_range(0.01..=1.0), rng.gen_range(0.0..=1.0));
        let got = gae(&r, &v, g, l).unwrap();
        for (a, b) in got.iter().zip(gae_oracle(&r, &v, g, l)) {
            gae_err = gae_err.max((a - b).abs());
        }
    }
    let hand = gae(&[1.0, 0.0], &[0.5, 0.2, 0.0], 0.9, 0.8).unwrap();
    let hand_ok = (hand[0] - 0.536).abs() < 1e-12 && (hand[1] + 0.2).abs() < 1e-12;

    let a = arith_prepared();
    let rt = Runtime::load(&a.cfg).unwrap();
    let ex = rt.training_examples().unwrap();
    let mut policy = rt.new_policy();
    for w in policy.params_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    let mut old = policy.clone();
    for w in old.params_mut() {
        *w += rng.gen_range(-0.1..0.1);
    }
    let budget = a.cfg.refactor.budget;
    let batch: Vec<Trajectory> = ex[..12]
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let act = decode(&old, &e.state, budget, DecodeMode::Sample, i as u64).unwrap();
            let (lp, _) = sequence_logprob(&old, &e.state, &act.tokens).unwrap();
            Trajectory {
                state: e.state.clone(),
                logprob_old: lp,
                action: act,
                reward: 0.0,
                value: 0.0,
                advantage: Some(rng.gen_range(-1.5..1.5)),
            }
        })
        .collect();
    let sft: Vec<SftExample> = ex[..12]
        .iter()
        .map(|e| SftExample {
            state: e.state.clone(),
            target: sft_target(&rt.tokenizer.tokenize(&e.reference), budget),
        })
        .collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let fd_check = |p: &mut LinearPointerPolicy, f: &dyn Fn(&LinearPointerPolicy) -> (f64, Vec<f64>)| -> f64 {
        let (_, grad) = f(p);
        let mut worst: f64 = 0.0;
        for i in 0..p.params().len() {
            let w = p.params()[i];
            p.params_mut()[i] = w + h;
            let up = f(p).0;
            p.params_mut()[i] = w - h;
            let down = f(p).0;
            p.params_mut()[i] = w;
            worst = worst.max(rel_err((up - down) / (2.0 * h), grad[i]));
        }
        worst
    };
    for per_token in [false, true] {
        worst = worst.max(fd_check(&mut policy, &|p| {
            let l = ppo_loss(&batch, p, 0.2, per_token).unwrap();
            (l.loss, l.grad)
        }));
    }
    worst = worst.max(fd_check(&mut policy, &|p| {
        let (l, g, _) = sft_loss_and_grad(p, &sft).unwrap();
        (l, g)
    }));
    let el = t.elapsed();
    let ok = gae_err < 1e-10 && hand_ok && worst < 1e-5 && el < Duration::from_secs(30);
    let detail = format!(
        "GAE max error {gae_err:.1e}, hand case [{:.3}, {:.3}], worst gradient relative error {worst:.1e}",
        hand[0], hand[1]
    );
    assert!(verdict(3, "numeric RL checks", ok, &detail, el));
}

#[test]
fn criterion_4_reward_law() {
    let t = Instant::now();
    let exact = reward_from_parts(0.5, 16, 0.1, 0.5);
    let gt = "int x = a + b ; y = a * b ; return x ;";
    let tok = Tokenizer::train([gt], None);
    let gt_len = tok.tokenize(gt).len();
    let via_tokenizer = compute_reward(gt, gt, 0.1, 0.5, &tok, None, &CodeBleuWeights::default()).unwrap();
    let len_ok = gt_len == 16 && (via_tokenizer - (4.0 - 0.05)).abs() < 1e-12;
    let mono = (1..300).all(|n| reward_from_parts(0.5, n + 1, 0.1, 0.5) > reward_from_parts(0.5, n, 0.1, 0.5));

    let a = arith_prepared();
    train_sft_stage(&a.cfg).unwrap();
    let rt = Runtime::load(&a.cfg).unwrap();
    let sft = rt.load_policy(&rt.layout.sft_policy(), "train-sft").unwrap();
    let ex = rt.training_examples().unwrap();
    let parser = rt.parser();
    let env = rt.reward_env(parser.as_deref());
    let drift = |beta: f64| {
        let mut p = sft.clone();
        let cfg = PpoConfig {
            beta,
            batch: ex.len().div_ceil(10),
            ..PpoConfig::default()
        };
        let stats = ppo_train(&mut p, &sft, &env, &ex, &cfg, |_, _| {}).unwrap();
        let d = p.params().iter().zip(sft.params()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        (d, stats.len())
    };
    let (pinned, iters) = drift(1e6);
    let (free, _) = drift(0.0);
    let el = t.elapsed();
    let ok = exact == 1.95 && len_ok && mono && iters == 10 && pinned < 1e-3;
    let detail = format!(
        "reward {exact}, 16-token check {len_ok}, monotone in length {mono}, drift at beta=1e6 {pinned:.2e} \
         over {iters} iterations (beta=0: {free:.2e})"
    );
    assert!(verdict(4, "reward law", ok, &detail, el));
}

fn held_out_reward(
    rt: &Runtime,
    policy: &LinearPointerPolicy,
    reference: &LinearPointerPolicy,
) -> (RewardSummary, RewardSummary) {
    let docs = eval_docs(rt);
    let ex = rt.examples_for(&docs, true).unwrap();
    let parser = rt.parser();
    let env = rt.reward_env(parser.as_deref());
    let beta = rt.cfg.rl.beta;
    let greedy = evaluate_reward(policy, reference, &env, &ex, beta, DecodeMode::Greedy, 1, 0).unwrap();
    let sampled = evaluate_reward(policy, reference, &env, &ex, beta, DecodeMode::Sample, 4, rt.cfg.seed).unwrap();
    (greedy, sampled)
}

#[test]
fn criterion_5_training_efficacy() {
    let t = Instant::now();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("arith.toml", dir.path());
        let (sft, ppo) = train_all(&cfg);
        let rt = Runtime::load(&cfg).unwrap();
        let sftp = rt.load_policy(&rt.layout.sft_policy(), "train-sft").unwrap();
        let ppop = rt.load_policy(&rt.layout.ppo_policy(), "train-ppo").unwrap();
        let before = held_out_reward(&rt, &sftp, &sftp);
        let after = held_out_reward(&rt, &ppop, &sftp);
        let n = eval_docs(&rt).len();
        let bytes = std::fs::read(rt.layout.ppo_policy()).unwrap();
        (cfg.refactor.sft.epochs, sft, ppo, before, after, n, bytes)
    };
    let (epochs, sft, ppo, before, after, n, bytes) = run();
    let again = run();
    let ratio = sft.final_loss / sft.initial_loss;
    let gain = |a: &RewardSummary, b: &RewardSummary| b.mean_reward / a.mean_reward - 1.0;
    let (g_greedy, g_sampled) = (gain(&before.0, &after.0), gain(&before.1, &after.1));
    let deterministic = again.6 == bytes && again.4 == after && again.1.final_loss == sft.final_loss;
    let rising = ppo.last().unwrap().mean_reward > ppo[0].mean_reward;
    let el = t.elapsed();
    let ok = epochs <= 10
        && ratio <= 0.5
        && n == 50
        && g_greedy >= 0.10
        && g_sampled >= 0.10
        && deterministic
        && el < Duration::from_secs(300);
    let detail = format!(
        "SFT loss {:.3} -> {:.3} ({:.0}% lower, {epochs} epochs); held-out reward on {n} queries: greedy {:.3} -> {:.3} \
         ({:+.1}%), sampled {:.3} -> {:.3} ({:+.1}%); training reward rising {rising}; deterministic {deterministic}",
        sft.initial_loss,
        sft.final_loss,
        100.0 * (1.0 - ratio),
        before.0.mean_reward,
        after.0.mean_reward,
        100.0 * g_greedy,
        before.1.mean_reward,
        after.1.mean_reward,
        100.0 * g_sampled,
    );
    assert!(verdict(5, "end-to-end training efficacy", ok, &detail, el));
}

#[test]
fn criterion_6_preference_gap() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("gap.toml", dir.path());
    ingest_stage(&cfg).unwrap();
    index_stage(&cfg).unwrap();
    let report = eval_stage(&cfg, &cfg.eval.methods).unwrap();
    let text = std::fs::read_to_string(Layout::new(&cfg.out).report_txt()).unwrap();
    let mut found = None;
    for a in &report.retrievers {
        for b in &report.retrievers {
            if a.cos > b.cos && a.em < b.em {
                found = Some((a.clone(), b.clone()));
            }
        }
    }
    let columns = ["LS", "Cos", "EM", "BLEU"].iter().all(|c| text.contains(c));
    let el = t.elapsed();
    let detail = match &found {
        Some((a, b)) => format!(
            "{} cos {:.2} EM {:.2} vs {} cos {:.2} EM {:.2}",
            a.retriever,
            a.cos,
            100.0 * a.em,
            b.retriever,
            b.cos,
            100.0 * b.em
        ),
        None => "no retriever pair with higher cosine and lower EM".into(),
    };
    assert!(verdict(6, "preference gap", found.is_some() && columns, &detail, el));
}

#[test]
fn criterion_7_transfer() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let src = config("arith.toml", &dir.path().join("src"));
    train_all(&src);
    let source = eval_stage(&src, &[Method::Rrg, Method::RrgWoRl]).unwrap();

    let mut dst = config("arith.toml", &dir.path().join("dst"));
    dst.retriever.mode = RetrievalMode::Bm25;
    dst.generator.kind = GeneratorKind::Template;
    ingest_stage(&dst).unwrap();
    index_stage(&dst).unwrap();
    let (sl, dl) = (Layout::new(&src.out), Layout::new(&dst.out));
    std::fs::copy(sl.sft_policy(), dl.sft_policy()).unwrap();
    std::fs::copy(sl.ppo_policy(), dl.ppo_policy()).unwrap();
    let target = eval_stage(&dst, &[Method::Rrg, Method::RrgWoRl]);
    let el = t.elapsed();
    let detail = match &target {
        Ok(r) => r
            .rows
            .iter()
            .zip(&source.rows)
            .map(|(b, a)| {
                format!(
                    "{} CodeBLEU {:.2} -> {:.2} ({:+.2})",
                    a.method,
                    100.0 * a.codebleu,
                    100.0 * b.codebleu,
                    100.0 * (b.codebleu - a.codebleu)
                )
            })
            .collect::<Vec<_>>()
            .join(", "),
        Err(e) => format!("transfer run failed: {e}"),
    };
    assert!(verdict(7, "policy transfer (hash+echo -> bm25+template)", target.is_ok(), &detail, el));
}

fn cli_run(config: &Path, out: &Path) -> (Vec<u8>, Vec<u8>) {
    let bin = env!("CARGO_BIN_EXE_rrg");
    for stage in ["ingest", "index", "train-sft", "train-ppo", "eval"] {
        let st = Command::new(bin)
            .args([stage, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .env_remove(SEED_ENV)
            .output()
            .unwrap();
        assert!(st.status.success(), "{stage}: {}", String::from_utf8_lossy(&st.stderr));
    }
    let l = Layout::new(out);
    (std::fs::read(l.report_json()).unwrap(), std::fs::read(l.report_txt()).unwrap())
}

#[test]
fn criterion_8_cli_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("arith.toml");
    let a = cli_run(&cfg, &dir.path().join("a"));
    let b = cli_run(&cfg, &dir.path().join("b"));
    let el = t.elapsed();
    let ok = a == b && !a.0.is_empty();
    let detail = format!("report.json {} bytes, report.txt {} bytes, identical {}", a.0.len(), a.1.len(), a == b);
    assert!(verdict(8, "CLI determinism", ok, &detail, el));
}
