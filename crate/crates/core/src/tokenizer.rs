//! Shared word/symbol tokenizer with reserved special tokens.
//!
//! Text is first whitespace-normalized (runs of spaces and tabs collapse to a
//! single space, newlines are kept) and then cut into *pieces*:
//!
//! * a maximal run of word characters (alphanumeric or `_`),
//! * a single symbol character,
//! * a newline,
//! * a lone space that is not followed by a word or symbol.
//!
//! A space directly in front of a word or symbol is folded into that piece
//! (`" return"`), so detokenizing is plain concatenation. Pieces that are not
//! in the vocabulary fall back to byte tokens, which keeps the mapping total
//! without ever emitting a special token for ordinary text.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Integer id of a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Reserved token ids. These are never produced by [`Tokenizer::tokenize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials;

impl Specials {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    /// Shared out-of-candidate token used by the refactorer policy.
    pub const UNK: TokenId = TokenId(3);
    pub const QUERY_SEP: TokenId = TokenId(4);
    pub const CODE_SEP: TokenId = TokenId(5);

    const MARKERS: [&'static str; 6] = [
        "<pad>",
        "<bos>",
        "<eos>",
        "<unk>",
        "<query_sep>",
        "<code_sep>",
    ];

    pub fn is_special(id: TokenId) -> bool {
        id.index() < Self::MARKERS.len()
    }

    pub fn marker(id: TokenId) -> Option<&'static str> {
        Self::MARKERS.get(id.index()).copied()
    }
}

const NUM_SPECIALS: u32 = 6;
const BYTE_BASE: u32 = NUM_SPECIALS;
const FIRST_PIECE: u32 = BYTE_BASE + 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("byte-fallback tokens do not form valid UTF-8")]
    InvalidUtf8,
}

/// Collapse runs of spaces and tabs into one space; newlines are preserved.
pub fn normalize_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_run = false;
    for c in text.chars() {
        if c == ' ' || c == '\t' {
            if !in_run {
                out.push(' ');
                in_run = true;
            }
        } else {
            out.push(c);
            in_run = false;
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Split text into pieces, see the module docs.
pub fn pieces(text: &str) -> Vec<String> {
    let text = normalize_whitespace(text);
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut piece = String::new();
        if chars[i] == ' ' {
            piece.push(' ');
            i += 1;
            if i >= chars.len() || chars[i] == '\n' {
                out.push(piece);
                continue;
            }
        }
        let c = chars[i];
        if c == '\n' {
            out.push("\n".to_string());
            i += 1;
        } else if is_word_char(c) {
            while i < chars.len() && is_word_char(chars[i]) {
                piece.push(chars[i]);
                i += 1;
            }
            out.push(piece);
        } else {
            piece.push(c);
            i += 1;
            out.push(piece);
        }
    }
    out
}

/// Words and symbols of `text` with all whitespace dropped.
///
/// This is the token view used by exact match, BLEU and the lexical
/// retrievers.
pub fn lex_terms(text: &str) -> Vec<String> {
    pieces(text)
        .into_iter()
        .filter_map(|p| {
            let t = p.trim_start_matches(' ');
            if t.is_empty() || t == "\n" {
                None
            } else {
                Some(t.to_string())
            }
        })
        .collect()
}

/// A trained piece vocabulary plus reserved special and byte tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerFile", into = "TokenizerFile")]
pub struct Tokenizer {
    pieces: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    pieces: Vec<String>,
}

impl From<TokenizerFile> for Tokenizer {
    fn from(file: TokenizerFile) -> Self {
        Tokenizer::from_pieces(file.pieces)
    }
}

impl From<Tokenizer> for TokenizerFile {
    fn from(tok: Tokenizer) -> Self {
        TokenizerFile { pieces: tok.pieces }
    }
}

impl Tokenizer {
    /// Build a vocabulary from a corpus. Pieces are ordered by descending
    /// frequency, then lexicographically, so ids are reproducible and the
    /// lowest piece ids are the most frequent tokens.
    pub fn train<'a, I>(texts: I, max_pieces: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for p in pieces(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_pieces {
            ranked.truncate(max);
        }
        Self::from_pieces(ranked.into_iter().map(|(p, _)| p).collect())
    }

    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let lookup = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), TokenId(FIRST_PIECE + i as u32)))
            .collect();
        Tokenizer { pieces, lookup }
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_PIECE as usize + self.pieces.len()
    }

    /// The `m` most frequent learned pieces.
    pub fn most_frequent(&self, m: usize) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.pieces.len().min(m)).map(|i| TokenId(FIRST_PIECE + i as u32))
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for p in pieces(text) {
            match self.lookup.get(&p) {
                Some(&id) => ids.push(id),
                None => ids.extend(p.bytes().map(|b| TokenId(BYTE_BASE + b as u32))),
            }
        }
        ids
    }

    /// Render ids back to text. Special tokens render as their markers
    /// (`<code_sep>`, ...).
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        self.render(ids, true)
    }

    /// Like [`detokenize`](Self::detokenize) but drops special tokens.
    pub fn detokenize_plain(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        self.render(ids, false)
    }

    fn render(&self, ids: &[TokenId], markers: bool) -> Result<String, TokenizerError> {
        let mut out = Vec::<u8>::new();
        for &id in ids {
            if let Some(marker) = Specials::marker(id) {
                if markers {
                    out.extend_from_slice(marker.as_bytes());
                }
            } else if id.0 < FIRST_PIECE {
                out.push((id.0 - BYTE_BASE) as u8);
            } else {
                let piece = self
                    .pieces
                    .get((id.0 - FIRST_PIECE) as usize)
                    .ok_or(TokenizerError::UnknownId(id))?;
                out.extend_from_slice(piece.as_bytes());
            }
        }
        String::from_utf8(out).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// Text of a single id, for diagnostics.
    pub fn piece(&self, id: TokenId) -> Option<String> {
        if let Some(m) = Specials::marker(id) {
            return Some(m.to_string());
        }
        if id.0 < FIRST_PIECE {
            return Some(format!("<0x{:02x}>", id.0 - BYTE_BASE));
        }
        self.pieces.get((id.0 - FIRST_PIECE) as usize).cloned()
    }

    /// Stable content hash of the vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"rrg-tokenizer-v1\0");
        for p in &self.pieces {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}
