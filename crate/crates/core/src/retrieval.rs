//! Dense recall over NL embeddings followed by an Okapi BM25 rerank.
//!
//! Both stages are exact full scans. Ranking ties always break by ascending
//! doc id so results are reproducible regardless of thread count.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{manifest_path, KnowledgeBase};
use crate::tokenizer::lex_terms;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index was built with provider `{built}` but is queried with `{current}`; rebuild the index")]
    StaleIndex { built: String, current: String },
    #[error("unknown document `{0}`")]
    UnknownDoc(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid retrieval parameters: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lower-cased lexical terms shared by the hasher and BM25.
pub fn terms(text: &str) -> Vec<String> {
    lex_terms(text).into_iter().map(|t| t.to_lowercase()).collect()
}

/// Text to vector mapping used by dense recall.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Identifies the provider and its settings; stored in built indexes.
    fn fingerprint(&self) -> String;
    fn embed_corpus(&self, text: &str) -> Vec<f64>;
    fn embed_query(&self, text: &str) -> Vec<f64> {
        self.embed_corpus(text)
    }
}

/// Signed feature hashing of term unigrams and bigrams, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, RetrievalError> {
        if dim < 8 {
            return Err(RetrievalError::Config(format!("embedding dim must be at least 8, got {dim}")));
        }
        Ok(HashEmbedder { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hash-fnv1a-uni-bi-v1/{}", self.dim)
    }

    fn embed_corpus(&self, text: &str) -> Vec<f64> {
        hash_embed(text, self.dim)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn add_feature(v: &mut [f64], feature: &str) {
    let h = fnv1a(feature.as_bytes());
    let bucket = (h % v.len() as u64) as usize;
    v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
}

/// Deterministic unit-norm embedding. `dim` must be at least 8.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 8, "hash_embed needs dim >= 8");
    let t = terms(text);
    let mut v = vec![0.0; dim];
    for w in &t {
        add_feature(&mut v, &format!("1:{w}"));
    }
    for pair in t.windows(2) {
        add_feature(&mut v, &format!("2:{} {}", pair[0], pair[1]));
    }
    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // empty text, or features that cancelled exactly
        add_feature(&mut v, "0:<empty>");
        norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranked candidate. `rank` is 1-based in the order of the producing stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub dense_score: f64,
    pub bm25_score: f64,
    pub rank: usize,
}

/// Descending score, then ascending id.
fn by_score_then_id(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Exact dense index over doc NL embeddings.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f64>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    vec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub provider_fingerprint: String,
    pub count: usize,
}

impl DenseIndex {
    pub fn build(kb: &KnowledgeBase, provider: &dyn EmbeddingProvider) -> Self {
        let rows: Vec<Vec<f64>> = kb.docs().par_iter().map(|d| provider.embed_corpus(&d.nl)).collect();
        DenseIndex {
            ids: kb.docs().iter().map(|d| d.id.clone()).collect(),
            dim: provider.dim(),
            vectors: rows.concat(),
            fingerprint: provider.fingerprint(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    fn check(&self, provider: &dyn EmbeddingProvider) -> Result<(), RetrievalError> {
        if provider.fingerprint() != self.fingerprint {
            return Err(RetrievalError::StaleIndex {
                built: self.fingerprint.clone(),
                current: provider.fingerprint(),
            });
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        Ok(())
    }

    /// Dot product of the query embedding with every row.
    pub fn scores(&self, provider: &dyn EmbeddingProvider, query: &str) -> Result<Vec<f64>, RetrievalError> {
        self.check(provider)?;
        let q = provider.embed_query(query);
        Ok((0..self.len()).map(|i| dot(&q, self.vector(i))).collect())
    }

    /// The `k` highest-scoring docs, skipping `exclude` if given.
    pub fn search(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<Vec<RetrievalResult>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::Config("k1 must be at least 1".into()));
        }
        let scores = self.scores(provider, query)?;
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| Some(self.ids[i].as_str()) != exclude).collect();
        order.sort_by(|&a, &b| by_score_then_id((&self.ids[a], scores[a]), (&self.ids[b], scores[b])));
        Ok(order
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, i)| RetrievalResult {
                doc_id: self.ids[i].clone(),
                dense_score: scores[i],
                bm25_score: 0.0,
                rank: r + 1,
            })
            .collect())
    }

    fn score_of(&self, provider: &dyn EmbeddingProvider, query: &str, id: &str) -> Result<f64, RetrievalError> {
        let i = self
            .ids
            .binary_search_by(|x| x.as_str().cmp(id))
            .map_err(|_| RetrievalError::UnknownDoc(id.to_string()))?;
        Ok(dot(&provider.embed_query(query), self.vector(i)))
    }

    /// Write `path` (one `{id, vec}` per line) and its manifest.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            let row = EmbeddingRow {
                id: id.clone(),
                vec: self.vector(i).to_vec(),
            };
            serde_json::to_writer(&mut out, &row).expect("rows serialize");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(io_err(path))?;
        let manifest = EmbeddingManifest {
            dim: self.dim,
            provider_fingerprint: self.fingerprint.clone(),
            count: self.ids.len(),
        };
        let mpath = manifest_path(path);
        let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
        serde_json::to_writer_pretty(&mut f, &manifest).expect("manifest serializes");
        f.write_all(b"\n").map_err(io_err(&mpath))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let corrupt = |reason: String| RetrievalError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mpath = manifest_path(path);
        let manifest: EmbeddingManifest =
            serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)
                .map_err(|e| corrupt(format!("manifest: {e}")))?;
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for line in body.lines() {
            let row: EmbeddingRow = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if row.vec.len() != manifest.dim {
                return Err(corrupt(format!("row `{}` has dim {}", row.id, row.vec.len())));
            }
            ids.push(row.id);
            vectors.extend(row.vec);
        }
        if ids.len() != manifest.count || ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("rows missing or out of order".into()));
        }
        Ok(DenseIndex {
            ids,
            dim: manifest.dim,
            vectors,
            fingerprint: manifest.provider_fingerprint,
        })
    }
}

/// Which doc field BM25 indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bm25Field {
    #[default]
    Nl,
    Code,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Bm25Doc {
    id: String,
    len: usize,
    tf: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    field: Bm25Field,
    avgdl: f64,
    df: BTreeMap<String, usize>,
    docs: Vec<Bm25Doc>,
    #[serde(skip)]
    pos: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(kb: &KnowledgeBase, field: Bm25Field, params: Bm25Params) -> Self {
        let texts = kb.docs().iter().map(|d| match field {
            Bm25Field::Nl => (d.id.as_str(), terms(&d.nl)),
            Bm25Field::Code => (d.id.as_str(), terms(&d.code)),
            Bm25Field::Both => (d.id.as_str(), terms(&format!("{}\n{}", d.nl, d.code))),
        });
        Self::from_terms(texts, field, params)
    }

    /// Index pre-tokenized documents.
    pub fn from_terms<'a>(
        docs: impl IntoIterator<Item = (&'a str, Vec<String>)>,
        field: Bm25Field,
        params: Bm25Params,
    ) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for (id, toks) in docs {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            out.push(Bm25Doc {
                id: id.to_string(),
                len: toks.len(),
                tf,
            });
        }
        let total: usize = out.iter().map(|d| d.len).sum();
        let avgdl = if out.is_empty() { 0.0 } else { total as f64 / out.len() as f64 };
        let mut idx = Bm25Index {
            params,
            field,
            avgdl,
            df,
            docs: out,
            pos: HashMap::new(),
        };
        idx.reindex();
        idx
    }

    fn reindex(&mut self) {
        self.pos = self.docs.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn field(&self) -> Bm25Field {
        self.field
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_at(&self, query: &[String], i: usize) -> f64 {
        let d = &self.docs[i];
        let Bm25Params { k1, b } = self.params;
        let norm = if self.avgdl > 0.0 { d.len as f64 / self.avgdl } else { 0.0 };
        query
            .iter()
            .map(|t| match d.tf.get(t) {
                None => 0.0,
                Some(&tf) => {
                    let tf = tf as f64;
                    self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
                }
            })
            .sum()
    }

    /// Okapi BM25 of `query` (already split into terms; repeats count) against one doc.
    pub fn score(&self, query: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let i = *self
            .pos
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
        Ok(self.score_at(query, i))
    }

    /// Full-scan top `k`.
    pub fn search(&self, query: &str, k: usize, exclude: Option<&str>) -> Result<Vec<RetrievalResult>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let q = terms(query);
        let mut scored: Vec<(usize, f64)> = (0..self.docs.len())
            .filter(|&i| Some(self.docs[i].id.as_str()) != exclude)
            .map(|i| (i, self.score_at(&q, i)))
            .collect();
        scored.sort_by(|a, b| by_score_then_id((&self.docs[a.0].id, a.1), (&self.docs[b.0].id, b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, (i, s))| RetrievalResult {
                doc_id: self.docs[i].id.clone(),
                dense_score: 0.0,
                bm25_score: s,
                rank: r + 1,
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let body = serde_json::to_string(self).expect("index serializes");
        fs::write(path, body + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        let mut idx: Bm25Index = serde_json::from_str(&body).map_err(|e| RetrievalError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        idx.reindex();
        Ok(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    #[default]
    TwoStage,
    Dense,
    Bm25,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [RetrievalMode::Dense, RetrievalMode::Bm25, RetrievalMode::TwoStage];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalMode::TwoStage => "two-stage",
            RetrievalMode::Dense => "dense",
            RetrievalMode::Bm25 => "bm25",
        }
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-stage" => Ok(RetrievalMode::TwoStage),
            "dense" => Ok(RetrievalMode::Dense),
            "bm25" => Ok(RetrievalMode::Bm25),
            _ => Err(RetrievalError::Config(format!("unknown retrieval mode `{s}`"))),
        }
    }
}

/// Dense index, BM25 index and the provider that built the former.
pub struct Retriever {
    pub provider: Box<dyn EmbeddingProvider>,
    pub dense: DenseIndex,
    pub bm25: Bm25Index,
    pub mode: RetrievalMode,
    pub k1: usize,
    pub k2: usize,
}

impl Retriever {
    pub fn build(
        kb: &KnowledgeBase,
        provider: Box<dyn EmbeddingProvider>,
        field: Bm25Field,
        params: Bm25Params,
    ) -> Self {
        let dense = DenseIndex::build(kb, provider.as_ref());
        let bm25 = Bm25Index::build(kb, field, params);
        Retriever {
            provider,
            dense,
            bm25,
            mode: RetrievalMode::TwoStage,
            k1: 10,
            k2: 3,
        }
    }

    pub fn with_mode(mut self, mode: RetrievalMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_k(mut self, k1: usize, k2: usize) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    /// Ranked top `k2` for `query`. Every result carries both scores.
    pub fn retrieve(&self, query: &str, exclude: Option<&str>) -> Result<Vec<RetrievalResult>, RetrievalError> {
        self.retrieve_as(self.mode, query, exclude)
    }

    pub fn retrieve_as(
        &self,
        mode: RetrievalMode,
        query: &str,
        exclude: Option<&str>,
    ) -> Result<Vec<RetrievalResult>, RetrievalError> {
        if self.k2 == 0 || self.k2 > self.k1 {
            return Err(RetrievalError::Config(format!("need 1 <= k2 <= k1, got k1={} k2={}", self.k1, self.k2)));
        }
        let q = terms(query);
        let mut out = match mode {
            RetrievalMode::TwoStage => {
                let stage1 = self.dense.search(self.provider.as_ref(), query, self.k1, exclude)?;
                rerank(&self.bm25, &q, stage1, self.k2)?
            }
            RetrievalMode::Dense => self.dense.search(self.provider.as_ref(), query, self.k2, exclude)?,
            RetrievalMode::Bm25 => self.bm25.search(query, self.k2, exclude)?,
        };
        for r in &mut out {
            match mode {
                RetrievalMode::Dense => r.bm25_score = self.bm25.score(&q, &r.doc_id)?,
                RetrievalMode::Bm25 => r.dense_score = self.dense.score_of(self.provider.as_ref(), query, &r.doc_id)?,
                RetrievalMode::TwoStage => {}
            }
        }
        Ok(out)
    }
}

/// Rescore stage-1 candidates by BM25 and keep the best `k2`.
pub fn rerank(
    bm25: &Bm25Index,
    query_terms: &[String],
    mut candidates: Vec<RetrievalResult>,
    k2: usize,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    for c in &mut candidates {
        c.bm25_score = bm25.score(query_terms, &c.doc_id)?;
    }
    candidates.sort_by(|a, b| by_score_then_id((&a.doc_id, a.bm25_score), (&b.doc_id, b.bm25_score)));
    candidates.truncate(k2);
    for (r, c) in candidates.iter_mut().enumerate() {
        c.rank = r + 1;
    }
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodeDoc, Split};
    use proptest::prelude::*;

    fn kb(nls: &[&str]) -> KnowledgeBase {
        let docs = nls
            .iter()
            .enumerate()
            .map(|(i, nl)| CodeDoc {
                id: format!("d{i:02}"),
                nl: nl.to_string(),
                code: format!("return {i};"),
                lang: "java".into(),
                split: Split::Train,
            })
            .collect();
        KnowledgeBase::new("java", docs).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b)
    }

    #[test]
    fn hash_embedding_is_unit_and_deterministic() {
        for t in ["", "add two ints", "a a a a", "return x ;"] {
            let v = hash_embed(t, 64);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{t:?}");
            assert_eq!(v, hash_embed(t, 64));
        }
    }

    #[test]
    fn hash_embedding_orders_similarity() {
        let a = hash_embed("add two ints", 256);
        let b = hash_embed("add two integers", 256);
        let c = hash_embed("open file", 256);
        assert!(cos(&a, &b) > cos(&a, &c));
    }

    #[test]
    fn small_dim_rejected() {
        assert!(HashEmbedder::new(4).is_err());
    }

    #[test]
    fn bm25_empty_overlap_is_zero_and_self_match_positive() {
        let idx = Bm25Index::from_terms([("x", terms("sort list"))], Bm25Field::Nl, Bm25Params::default());
        assert_eq!(idx.score(&terms("open file"), "x").unwrap(), 0.0);
        assert!(idx.score(&terms("sort list"), "x").unwrap() > 0.0);
        assert!(matches!(idx.score(&[], "nope"), Err(RetrievalError::UnknownDoc(_))));
    }

    #[test]
    fn stale_index_detected() {
        let k = kb(&["a", "b"]);
        let idx = DenseIndex::build(&k, &HashEmbedder::new(16).unwrap());
        let err = idx.search(&HashEmbedder::new(32).unwrap(), "a", 1, None).unwrap_err();
        assert!(matches!(err, RetrievalError::StaleIndex { .. }));
    }

    #[test]
    fn orthogonal_query_falls_back_to_id_order() {
        struct Axis;
        impl EmbeddingProvider for Axis {
            fn dim(&self) -> usize {
                2
            }
            fn fingerprint(&self) -> String {
                "axis".into()
            }
            fn embed_corpus(&self, _: &str) -> Vec<f64> {
                vec![1.0, 0.0]
            }
            fn embed_query(&self, _: &str) -> Vec<f64> {
                vec![0.0, 1.0]
            }
        }
        let k = kb(&["z", "y", "x"]);
        let idx = DenseIndex::build(&k, &Axis);
        let got = idx.search(&Axis, "q", 3, None).unwrap();
        assert!(got.iter().all(|r| r.dense_score == 0.0));
        assert_eq!(got.iter().map(|r| r.doc_id.as_str()).collect::<Vec<_>>(), ["d00", "d01", "d02"]);
    }

    #[test]
    fn exclude_self_drops_exact_id() {
        let k = kb(&["sort a list", "sort the list", "open file"]);
        let r = Retriever::build(&k, Box::new(HashEmbedder::new(64).unwrap()), Bm25Field::Nl, Bm25Params::default())
            .with_k(3, 2);
        let got = r.retrieve("sort a list", Some("d00")).unwrap();
        assert!(got.iter().all(|x| x.doc_id != "d00"));
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn persistence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let k = kb(&["sort a list", "open a file", "add numbers"]);
        let p = HashEmbedder::new(32).unwrap();
        let dense = DenseIndex::build(&k, &p);
        dense.save(&dir.path().join("emb.jsonl")).unwrap();
        let back = DenseIndex::load(&dir.path().join("emb.jsonl")).unwrap();
        assert_eq!(back.ids(), dense.ids());
        assert_eq!(back.vectors, dense.vectors);
        let bm = Bm25Index::build(&k, Bm25Field::Both, Bm25Params::default());
        bm.save(&dir.path().join("bm25.json")).unwrap();
        let bm2 = Bm25Index::load(&dir.path().join("bm25.json")).unwrap();
        let q = terms("add a list");
        for d in k.docs() {
            assert_eq!(bm.score(&q, &d.id).unwrap(), bm2.score(&q, &d.id).unwrap());
        }
    }

    proptest! {
        #[test]
        fn bm25_adding_query_term_never_hurts(extra in 0usize..5, filler in 1usize..6) {
            // doc length held fixed: one filler word is swapped for a query term
            let base: Vec<String> = std::iter::repeat_n("pad".to_string(), filler + extra)
                .chain(["sort".to_string()])
                .collect();
            let mut more = base.clone();
            more[0] = "sort".to_string();
            let others = [("o1", terms("open file now")), ("o2", terms("read file"))];
            let a = Bm25Index::from_terms(
                others.iter().cloned().chain([("d", base)]),
                Bm25Field::Nl,
                Bm25Params::default(),
            );
            let b = Bm25Index::from_terms(
                others.iter().cloned().chain([("d", more)]),
                Bm25Field::Nl,
                Bm25Params::default(),
            );
            let q = terms("sort");
            prop_assert!(b.score(&q, "d").unwrap() >= a.score(&q, "d").unwrap());
        }
    }
}
