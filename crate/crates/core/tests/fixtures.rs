//! The bundled fixture files match the generators that produced them.

use std::path::{Path, PathBuf};

use rrg::corpus::{ingest, CodeDoc};
use rrg::parser::ParserRegistry;
use rrg::synth;

fn path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn same(name: &str, expect: Vec<CodeDoc>) {
    let got = ingest(&path(name), "java").unwrap();
    assert_eq!((got.skipped, got.duplicates), (0, 0), "{name}");
    assert_eq!(got.docs, expect, "{name} is stale; rerun `cargo run --example make_fixtures`");
}

#[test]
fn corpora_match_generators() {
    same("arith.jsonl", synth::arithmetic_corpus(11));
    same("gap.jsonl", synth::preference_gap_corpus());
    same("syntax.jsonl", synth::syntax_fixture());
    same("bm25.jsonl", synth::bm25_fixture());
    same("retrieval_1000.jsonl", synth::retrieval_corpus(1000, 3));
    same("retrieval_50.jsonl", synth::retrieval_corpus(50, 5));
    let q: Vec<String> = std::fs::read_to_string(path("retrieval_queries.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(q, synth::retrieval_queries(50, 3));
}

#[test]
fn syntax_fixture_filters_to_six() {
    let docs = ingest(&path("syntax.jsonl"), "java").unwrap().docs;
    let kept = rrg::corpus::filter_syntax(docs, &ParserRegistry::builtin()).unwrap();
    assert_eq!(kept.len(), 6);
    assert!(kept.iter().all(|d| d.id.starts_with("good-")));
}

#[test]
fn configs_load() {
    for name in ["arith.toml", "gap.toml"] {
        let cfg = rrg::pipeline::ExperimentConfig::load(&path(name)).unwrap();
        cfg.validate().unwrap();
        assert!(cfg.corpus.paths.iter().all(|p| p.exists()), "{name}");
    }
}
