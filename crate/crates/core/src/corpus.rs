//! NL/code records, syntax filtering and the knowledge base.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parser::ParserRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "valid" | "validation" | "dev" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One NL/code pair; the retrieval unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDoc {
    pub id: String,
    pub nl: String,
    pub code: String,
    pub lang: String,
    pub split: Split,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: no valid records")]
    EmptyCorpus(String),
    #[error("no parser registered for language `{0}`")]
    NoParser(String),
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("knowledge base at {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Deserialize)]
struct Record {
    id: Option<String>,
    #[serde(alias = "docstring", alias = "nl_query")]
    nl: Option<String>,
    code: Option<String>,
    #[serde(alias = "partition")]
    split: Option<String>,
}

/// Result of [`ingest`]: accepted docs plus the counts of rejected lines.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub docs: Vec<CodeDoc>,
    /// Lines that were not JSON, lacked `nl`/`code`/`split`, or had them empty.
    pub skipped: usize,
    /// Records whose id was already taken by an earlier line.
    pub duplicates: usize,
}

/// Id used when a record has none: a hash of its content.
pub fn synthesize_id(nl: &str, code: &str) -> String {
    let mut h = Sha256::new();
    h.update(nl.as_bytes());
    h.update([0u8]);
    h.update(code.as_bytes());
    format!("h{}", hex::encode(&h.finalize()[..6]))
}

/// Read a line-delimited record file.
pub fn ingest(path: &Path, lang: &str) -> Result<Ingested, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    ingest_reader(file, lang, &path.display().to_string()).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        e => e,
    })
}

/// [`ingest`] over any reader; `label` names the source in errors.
pub fn ingest_reader<R: Read>(reader: R, lang: &str, label: &str) -> Result<Ingested, CorpusError> {
    let mut out = Ingested {
        docs: Vec::new(),
        skipped: 0,
        duplicates: 0,
    };
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(io_err(Path::new(label)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{label}:{}: malformed record: {e}", lineno + 1);
                out.skipped += 1;
                continue;
            }
        };
        let (Some(nl), Some(code), Some(split)) = (rec.nl, rec.code, rec.split.as_deref().and_then(Split::parse)) else {
            log::warn!("{label}:{}: missing nl, code or split", lineno + 1);
            out.skipped += 1;
            continue;
        };
        if nl.trim().is_empty() || code.trim().is_empty() {
            log::warn!("{label}:{}: empty nl or code", lineno + 1);
            out.skipped += 1;
            continue;
        }
        let id = rec.id.unwrap_or_else(|| synthesize_id(&nl, &code));
        if !seen.insert(id.clone()) {
            log::warn!("{label}:{}: duplicate id `{id}`", lineno + 1);
            out.duplicates += 1;
            continue;
        }
        out.docs.push(CodeDoc {
            id,
            nl,
            code,
            lang: lang.to_string(),
            split,
        });
    }
    if out.docs.is_empty() {
        return Err(CorpusError::EmptyCorpus(label.to_string()));
    }
    Ok(out)
}

/// Keep only docs whose code parses. Rejections are logged with the doc id.
pub fn filter_syntax(docs: Vec<CodeDoc>, parsers: &ParserRegistry) -> Result<Vec<CodeDoc>, CorpusError> {
    let mut langs: Vec<&str> = docs.iter().map(|d| d.lang.as_str()).collect();
    langs.dedup();
    for lang in langs {
        if parsers.get(lang).is_none() {
            return Err(CorpusError::NoParser(lang.to_string()));
        }
    }
    let keep: Vec<bool> = docs
        .par_iter()
        .map(|d| {
            let parser = parsers.get(&d.lang).expect("checked above");
            match parser.parse(&d.code) {
                Ok(_) => true,
                Err(e) => {
                    log::info!("dropping `{}`: {e}", d.id);
                    false
                }
            }
        })
        .collect();
    Ok(docs.into_iter().zip(keep).filter_map(|(d, k)| k.then_some(d)).collect())
}

/// Draw `min(n, |docs|)` docs uniformly without replacement.
pub fn sample_training(docs: &[CodeDoc], n: usize, seed: u64) -> Vec<CodeDoc> {
    if n >= docs.len() {
        return docs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample(&mut rng, docs.len(), n)
        .into_iter()
        .map(|i| docs[i].clone())
        .collect()
}

/// Sidecar written next to a persisted knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbManifest {
    pub lang: String,
    pub count: usize,
    pub content_hash: String,
}

/// The merged, id-ordered document collection retrieval runs over.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    lang: String,
    docs: Vec<CodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct StoredDoc<'a> {
    id: std::borrow::Cow<'a, str>,
    nl: std::borrow::Cow<'a, str>,
    code: std::borrow::Cow<'a, str>,
    split: Split,
}

impl KnowledgeBase {
    pub fn new(lang: &str, mut docs: Vec<CodeDoc>) -> Result<Self, CorpusError> {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = docs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(CorpusError::DuplicateId(w[0].id.clone()));
        }
        Ok(KnowledgeBase {
            lang: lang.to_string(),
            docs,
        })
    }

    pub fn lang(&self) -> &str {
        &self.lang
    }

    pub fn docs(&self) -> &[CodeDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CodeDoc> {
        self.docs
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.docs[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CodeDoc> {
        self.docs.iter().filter(move |d| d.split == split)
    }

    /// Canonical record-file bytes; the content hash is taken over these.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let rec = StoredDoc {
                id: (&d.id).into(),
                nl: (&d.nl).into(),
                code: (&d.code).into(),
                split: d.split,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain strings serialize"));
            out.push('\n');
        }
        out
    }

    pub fn manifest(&self) -> KbManifest {
        KbManifest {
            lang: self.lang.clone(),
            count: self.docs.len(),
            content_hash: hex::encode(Sha256::digest(self.to_jsonl().as_bytes())),
        }
    }

    /// Write `path` plus `path.manifest.json`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body = self.to_jsonl();
        fs::write(path, &body).map_err(io_err(path))?;
        let mpath = manifest_path(path);
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(&mpath, manifest + "\n").map_err(io_err(&mpath))
    }

    /// Load and verify against the manifest.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mpath = manifest_path(path);
        let corrupt = |reason: String| CorpusError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let manifest: KbManifest = serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)
            .map_err(|e| corrupt(format!("manifest: {e}")))?;
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        if hash != manifest.content_hash {
            return Err(corrupt("content hash does not match manifest".into()));
        }
        let mut docs = Vec::new();
        for line in body.lines() {
            let rec: StoredDoc = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            docs.push(CodeDoc {
                id: rec.id.into_owned(),
                nl: rec.nl.into_owned(),
                code: rec.code.into_owned(),
                lang: manifest.lang.clone(),
                split: rec.split,
            });
        }
        if docs.len() != manifest.count {
            return Err(corrupt("record count does not match manifest".into()));
        }
        Self::new(&manifest.lang, docs)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, code: &str) -> CodeDoc {
        CodeDoc {
            id: id.into(),
            nl: format!("nl for {id}"),
            code: code.into(),
            lang: "python".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn ingest_counts_skips_and_duplicates() {
        let src = r#"{"id":"a","nl":"add","code":"return a+b","split":"train"}
{"id":"b","nl":"sub","split":"test"}
not json
{"id":"a","nl":"again","code":"x","split":"valid"}
{"nl":"mul","code":"return a*b","split":"valid","extra":1}
"#;
        let got = ingest_reader(src.as_bytes(), "python", "mem").unwrap();
        assert_eq!(got.docs.len(), 2);
        assert_eq!(got.skipped, 2);
        assert_eq!(got.duplicates, 1);
        assert_eq!(got.docs[1].id, synthesize_id("mul", "return a*b"));
        assert_eq!(got.docs[1].split, Split::Valid);
    }

    #[test]
    fn ingest_empty_is_error() {
        let err = ingest_reader("\n{\"nl\":\"x\"}\n".as_bytes(), "java", "mem").unwrap_err();
        assert!(matches!(err, CorpusError::EmptyCorpus(_)));
        assert!(matches!(
            ingest(Path::new("/definitely/not/here.jsonl"), "java"),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn filter_drops_unparseable_and_is_idempotent() {
        let docs = vec![
            doc("1", "def f(a):\n    return a\n"),
            doc("2", "x = 1\n"),
            doc("3", "def f(:\n    pass\n"),
        ];
        let reg = ParserRegistry::builtin();
        let once = filter_syntax(docs, &reg).unwrap();
        assert_eq!(once.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["1", "2"]);
        let twice = filter_syntax(once.clone(), &reg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn filter_without_parser_is_config_error() {
        let mut d = doc("1", "x");
        d.lang = "cobol".into();
        assert!(matches!(
            filter_syntax(vec![d], &ParserRegistry::builtin()),
            Err(CorpusError::NoParser(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_clamped() {
        let docs: Vec<_> = (0..50).map(|i| doc(&format!("{i:03}"), "x = 1")).collect();
        let a = sample_training(&docs, 10, 7);
        let b = sample_training(&docs, 10, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert_eq!(sample_training(&docs, 500, 7).len(), 50);
    }

    #[test]
    fn kb_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let kb = KnowledgeBase::new("python", vec![doc("b", "y = 2"), doc("a", "x = 1")]).unwrap();
        assert_eq!(kb.docs()[0].id, "a");
        let p = dir.path().join("kb.jsonl");
        kb.save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        let loaded = KnowledgeBase::load(&p).unwrap();
        assert_eq!(loaded.docs(), kb.docs());
        loaded.save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert_eq!(kb.get("b").unwrap().code, "y = 2");

        fs::write(&p, "tampered\n").unwrap();
        assert!(matches!(KnowledgeBase::load(&p), Err(CorpusError::Corrupt { .. })));
    }

    #[test]
    fn kb_rejects_duplicates() {
        assert!(KnowledgeBase::new("python", vec![doc("a", "x"), doc("a", "y")]).is_err());
    }
}
