//! Regenerate the bundled fixture corpora under `fixtures/`.
//!
//! ```text
//! cargo run --example make_fixtures
//! ```

use std::fs;
use std::path::Path;

use rrg::corpus::CodeDoc;
use rrg::synth;

fn write(dir: &Path, name: &str, docs: &[CodeDoc]) -> std::io::Result<()> {
    let body: String = docs.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect();
    fs::write(dir.join(name), body)
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir)?;
    write(&dir, "arith.jsonl", &synth::arithmetic_corpus(11))?;
    write(&dir, "gap.jsonl", &synth::preference_gap_corpus())?;
    write(&dir, "syntax.jsonl", &synth::syntax_fixture())?;
    write(&dir, "bm25.jsonl", &synth::bm25_fixture())?;
    write(&dir, "retrieval_1000.jsonl", &synth::retrieval_corpus(1000, 3))?;
    write(&dir, "retrieval_50.jsonl", &synth::retrieval_corpus(50, 5))?;
    let queries: String = synth::retrieval_queries(50, 3).into_iter().map(|q| q + "\n").collect();
    fs::write(dir.join("retrieval_queries.txt"), queries)?;
    println!("wrote fixtures to {}", dir.display());
    Ok(())
}
