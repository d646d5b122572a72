use super::{Builder, NodeId, ParseError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Class {
    Ident,
    Keyword,
    Number,
    Str,
    Op,
    Newline,
    Indent,
    Dedent,
    Eof,
}

#[derive(Debug, Clone)]
pub(crate) struct Tok {
    pub class: Class,
    pub text: String,
    pub line: usize,
    /// Byte offsets in the source; used to glue `>` `>` into a shift.
    pub start: usize,
    pub end: usize,
}

impl Tok {
    fn leaf_kind(&self) -> String {
        match self.class {
            Class::Ident => "identifier".into(),
            Class::Number => "number".into(),
            Class::Str => "string".into(),
            _ => self.text.clone(),
        }
    }

    fn significant(&self) -> bool {
        !matches!(
            self.class,
            Class::Newline | Class::Indent | Class::Dedent | Class::Eof
        )
    }
}

/// Longest operator from `ops` that prefixes `rest`.
pub(crate) fn match_op<'a>(rest: &str, ops: &[&'a str]) -> Option<&'a str> {
    ops.iter()
        .filter(|op| rest.starts_with(**op))
        .max_by_key(|op| op.len())
        .copied()
}

/// Scan a quoted literal starting at `i` (which holds the quote). Returns the
/// byte index one past the closing quote.
pub(crate) fn scan_quoted(src: &str, i: usize, quote: &str, multiline: bool, line: usize) -> Result<usize, ParseError> {
    let bytes = src.as_bytes();
    let mut j = i + quote.len();
    while j < bytes.len() {
        if src[j..].starts_with(quote) {
            return Ok(j + quote.len());
        }
        match bytes[j] {
            b'\\' => j += 2,
            b'\n' if !multiline => break,
            _ => j += 1,
        }
    }
    Err(ParseError::new(line, "unterminated literal"))
}

/// Token cursor that turns consumed tokens into tree leaves.
pub(crate) struct Cursor {
    toks: Vec<Tok>,
    pos: usize,
    next_index: usize,
    pub b: Builder,
}

pub(crate) struct Mark {
    pos: usize,
    next_index: usize,
    nodes: usize,
}

impl Cursor {
    pub fn new(mut toks: Vec<Tok>) -> Self {
        let line = toks.last().map(|t| t.line).unwrap_or(1);
        toks.push(Tok {
            class: Class::Eof,
            text: String::new(),
            line,
            start: usize::MAX,
            end: usize::MAX,
        });
        Cursor {
            toks,
            pos: 0,
            next_index: 0,
            b: Builder::default(),
        }
    }

    pub fn peek(&self) -> &Tok {
        &self.toks[self.pos]
    }

    pub fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)]
    }

    pub fn at_eof(&self) -> bool {
        self.peek().class == Class::Eof
    }

    /// Current token is the keyword or operator `text`.
    pub fn is(&self, text: &str) -> bool {
        let t = self.peek();
        matches!(t.class, Class::Op | Class::Keyword) && t.text == text
    }

    pub fn is_at(&self, k: usize, text: &str) -> bool {
        let t = self.peek_at(k);
        matches!(t.class, Class::Op | Class::Keyword) && t.text == text
    }

    pub fn class(&self) -> Class {
        self.peek().class
    }

    /// Tokens at `k` and `k + 1` touch in the source.
    pub fn adjacent(&self, k: usize) -> bool {
        self.peek_at(k).end == self.peek_at(k + 1).start
    }

    pub fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let t = self.peek();
        let found = if t.class == Class::Eof {
            "end of input".to_string()
        } else {
            format!("`{}`", t.text.escape_debug())
        };
        Err(ParseError::new(t.line, format!("{}, found {found}", msg.into())))
    }

    /// Consume a significant token as a leaf.
    pub fn bump(&mut self) -> NodeId {
        let t = &self.toks[self.pos];
        debug_assert!(t.significant());
        let id = self.b.leaf(t.leaf_kind(), t.text.clone(), self.next_index);
        self.next_index += 1;
        self.pos += 1;
        id
    }

    /// Consume a layout token (newline/indent/dedent) without a leaf.
    pub fn skip(&mut self) {
        debug_assert!(!self.peek().significant() && !self.at_eof());
        self.pos += 1;
    }

    pub fn expect(&mut self, text: &str) -> Result<NodeId, ParseError> {
        if self.is(text) {
            Ok(self.bump())
        } else {
            self.err(format!("expected `{text}`"))
        }
    }

    pub fn eat(&mut self, text: &str) -> Option<NodeId> {
        self.is(text).then(|| self.bump())
    }

    pub fn expect_ident(&mut self) -> Result<NodeId, ParseError> {
        if self.class() == Class::Ident {
            Ok(self.bump())
        } else {
            self.err("expected identifier")
        }
    }

    pub fn mark(&self) -> Mark {
        Mark {
            pos: self.pos,
            next_index: self.next_index,
            nodes: self.b.checkpoint(),
        }
    }

    pub fn reset(&mut self, m: Mark) {
        self.pos = m.pos;
        self.next_index = m.next_index;
        self.b.rollback(m.nodes);
    }
}
