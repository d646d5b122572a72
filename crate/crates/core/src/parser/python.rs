//! Python-like subset with significant indentation.
//!
//! Covers definitions, control flow, comprehensions, lambdas, imports and
//! the full expression precedence ladder. Not covered: `match`, f-string
//! interior parsing, and type-parameter syntax.

use super::lex::{match_op, scan_quoted, Class, Cursor, Tok};
use super::{NodeId, ParseError, Parser, Role, SyntaxTree};

pub struct PythonParser;

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global", "if",
    "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return", "try",
    "while", "with", "yield",
];

const OPS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "==", "!=", "<=", ">=", "<<", ">>",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", "(", ")", "[", "]", "{", "}", ",", ":",
    ".", ";", "@", "=", "+", "-", "*", "/", "%", "&", "|", "^", "~", "<", ">",
];

const AUG_OPS: &[&str] = &[
    "+=", "-=", "*=", "/=", "//=", "%=", "**=", ">>=", "<<=", "&=", "|=", "^=", "@=",
];

const GROUPING: &[&str] = &["tuple", "list", "parenthesized_expression", "starred"];

const STRING_PREFIXES: &[&str] = &[
    "r", "u", "b", "f", "br", "rb", "fr", "rf", "R", "U", "B", "F", "Br", "bR", "BR", "Rb", "rB",
    "RB", "Fr", "fR", "FR", "Rf", "rF", "RF",
];

fn push(toks: &mut Vec<Tok>, class: Class, text: &str, line: usize, start: usize, end: usize) {
    toks.push(Tok {
        class,
        text: text.to_string(),
        line,
        start,
        end,
    });
}

fn lex(src: &str) -> Result<Vec<Tok>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks: Vec<Tok> = Vec::new();
    let mut indents = vec![0usize];
    let mut depth = 0usize;
    let mut line = 1;
    let mut line_start = true;
    let mut i = 0;
    while i < src.len() {
        if line_start && depth == 0 {
            let mut col = 0;
            let mut j = i;
            while j < src.len() && (bytes[j] == b' ' || bytes[j] == b'\t' || bytes[j] == b'\x0c') {
                col = if bytes[j] == b'\t' { (col / 8 + 1) * 8 } else { col + 1 };
                j += 1;
            }
            if j >= src.len() || bytes[j] == b'\n' || bytes[j] == b'#' || bytes[j] == b'\r' {
                // blank or comment-only line
                while j < src.len() && bytes[j] != b'\n' {
                    j += 1;
                }
                i = j + 1;
                line += 1;
                continue;
            }
            let top = *indents.last().unwrap();
            if col > top {
                indents.push(col);
                push(&mut toks, Class::Indent, "", line, j, j);
            } else {
                while col < *indents.last().unwrap() {
                    indents.pop();
                    push(&mut toks, Class::Dedent, "", line, j, j);
                }
                if col != *indents.last().unwrap() {
                    return Err(ParseError::new(line, "unindent does not match any outer level"));
                }
            }
            line_start = false;
            i = j;
        }
        let c = src[i..].chars().next().unwrap();
        if c == '\n' {
            if depth == 0 {
                push(&mut toks, Class::Newline, "", line, i, i);
                line_start = true;
            }
            line += 1;
            i += 1;
            continue;
        }
        if c == '\\' && bytes.get(i + 1) == Some(&b'\n') {
            i += 2;
            line += 1;
            continue;
        }
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if c == '#' {
            while i < src.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let class;
        if c.is_alphabetic() || c == '_' {
            while i < src.len() {
                let d = src[i..].chars().next().unwrap();
                if d.is_alphanumeric() || d == '_' {
                    i += d.len_utf8();
                } else {
                    break;
                }
            }
            let word = &src[start..i];
            if STRING_PREFIXES.contains(&word) && matches!(bytes.get(i), Some(b'"' | b'\'')) {
                i = scan_string(src, i, line)?;
                class = Class::Str;
            } else if KEYWORDS.contains(&word) {
                class = Class::Keyword;
            } else {
                class = Class::Ident;
            }
        } else if c.is_ascii_digit()
            || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit()))
        {
            let hex = src[i..].starts_with("0x") || src[i..].starts_with("0X");
            i += 1;
            while i < src.len() {
                let d = bytes[i];
                if d.is_ascii_alphanumeric() || d == b'_' || d == b'.' {
                    i += 1;
                } else if (d == b'+' || d == b'-') && !hex && matches!(bytes[i - 1], b'e' | b'E') {
                    i += 1;
                } else {
                    break;
                }
            }
            class = Class::Number;
        } else if c == '"' || c == '\'' {
            i = scan_string(src, i, line)?;
            class = Class::Str;
        } else if let Some(op) = match_op(&src[i..], OPS) {
            i += op.len();
            match op {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => {
                    depth = depth
                        .checked_sub(1)
                        .ok_or_else(|| ParseError::new(line, format!("unmatched `{op}`")))?
                }
                _ => {}
            }
            class = if op == "..." { Class::Keyword } else { Class::Op };
        } else {
            return Err(ParseError::new(line, format!("unexpected character `{c}`")));
        }
        line += src[start..i].matches('\n').count();
        push(&mut toks, class, &src[start..i], line, start, i);
    }
    if depth > 0 {
        return Err(ParseError::new(line, "unclosed bracket"));
    }
    if toks.last().is_some_and(|t| t.class != Class::Newline) {
        push(&mut toks, Class::Newline, "", line, src.len(), src.len());
    }
    while indents.len() > 1 {
        indents.pop();
        push(&mut toks, Class::Dedent, "", line, src.len(), src.len());
    }
    Ok(toks)
}

fn scan_string(src: &str, i: usize, line: usize) -> Result<usize, ParseError> {
    let rest = &src[i..];
    for q in ["\"\"\"", "'''"] {
        if rest.starts_with(q) {
            return scan_quoted(src, i, q, true, line);
        }
    }
    let q = if rest.starts_with('"') { "\"" } else { "'" };
    scan_quoted(src, i, q, false, line)
}

impl Parser for PythonParser {
    fn lang(&self) -> &str {
        "python"
    }

    fn parse(&self, code: &str) -> Result<SyntaxTree, ParseError> {
        let mut p = PyGrammar { c: Cursor::new(lex(code)?) };
        let root = p.file()?;
        Ok(p.c.b.finish(root))
    }

    fn keywords(&self) -> &[&'static str] {
        KEYWORDS
    }
}

struct PyGrammar {
    c: Cursor,
}

type PResult = Result<NodeId, ParseError>;

impl PyGrammar {
    fn node(&mut self, kind: &str, children: Vec<NodeId>) -> NodeId {
        self.c.b.inner(kind, children)
    }

    fn is_any(&self, set: &[&str]) -> bool {
        set.iter().any(|s| self.c.is(s))
    }

    fn expect_newline(&mut self) -> Result<(), ParseError> {
        match self.c.class() {
            Class::Newline => {
                self.c.skip();
                Ok(())
            }
            Class::Eof => Ok(()),
            _ => self.c.err("expected end of line"),
        }
    }

    fn starts_expr(&self) -> bool {
        matches!(self.c.class(), Class::Ident | Class::Number | Class::Str)
            || self.is_any(&[
                "(", "[", "{", "-", "+", "~", "*", "...", "lambda", "not", "await", "None", "True",
                "False",
            ])
    }

    fn file(&mut self) -> PResult {
        let mut stmts = Vec::new();
        while !self.c.at_eof() {
            match self.c.class() {
                Class::Newline => self.c.skip(),
                Class::Indent => return self.c.err("unexpected indent"),
                _ => stmts.extend(self.statement()?),
            }
        }
        if stmts.is_empty() {
            return self.c.err("empty program");
        }
        Ok(self.node("module", stmts))
    }

    fn statement(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let compound = match () {
            _ if self.c.is("if") => Some(self.if_stmt()?),
            _ if self.c.is("while") => Some(self.while_stmt()?),
            _ if self.c.is("for") => Some(self.for_stmt(None)?),
            _ if self.c.is("def") => Some(self.def_stmt(None)?),
            _ if self.c.is("class") => Some(self.class_stmt()?),
            _ if self.c.is("try") => Some(self.try_stmt()?),
            _ if self.c.is("with") => Some(self.with_stmt(None)?),
            _ if self.c.is("@") => Some(self.decorated()?),
            _ if self.c.is("async") => {
                let kw = self.c.bump();
                Some(if self.c.is("def") {
                    self.def_stmt(Some(kw))?
                } else if self.c.is("for") {
                    self.for_stmt(Some(kw))?
                } else if self.c.is("with") {
                    self.with_stmt(Some(kw))?
                } else {
                    return self.c.err("expected `def`, `for` or `with` after `async`");
                })
            }
            _ => None,
        };
        match compound {
            Some(s) => Ok(vec![s]),
            None => self.simple_stmts(),
        }
    }

    fn simple_stmts(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut out = vec![self.small_stmt()?];
        while self.c.is(";") {
            let semi = self.c.bump();
            out.push(semi);
            if matches!(self.c.class(), Class::Newline | Class::Eof) {
                break;
            }
            out.push(self.small_stmt()?);
        }
        self.expect_newline()?;
        Ok(out)
    }

    fn suite(&mut self) -> PResult {
        if self.c.class() != Class::Newline {
            let stmts = self.simple_stmts()?;
            return Ok(self.node("block", stmts));
        }
        self.c.skip();
        if self.c.class() != Class::Indent {
            return self.c.err("expected an indented block");
        }
        self.c.skip();
        let mut stmts = Vec::new();
        while self.c.class() != Class::Dedent {
            if self.c.at_eof() {
                return self.c.err("expected dedent");
            }
            if self.c.class() == Class::Indent {
                return self.c.err("unexpected indent");
            }
            if self.c.class() == Class::Newline {
                self.c.skip();
                continue;
            }
            stmts.extend(self.statement()?);
        }
        self.c.skip();
        Ok(self.node("block", stmts))
    }

    fn small_stmt(&mut self) -> PResult {
        if self.is_any(&["pass", "break", "continue"]) {
            let kind = format!("{}_statement", self.c.peek().text);
            let kw = self.c.bump();
            return Ok(self.node(&kind, vec![kw]));
        }
        if self.c.is("return") {
            let mut ch = vec![self.c.bump()];
            if self.starts_expr() {
                ch.push(self.testlist(true)?);
            }
            return Ok(self.node("return_statement", ch));
        }
        if self.c.is("raise") {
            let mut ch = vec![self.c.bump()];
            if self.starts_expr() {
                ch.push(self.test()?);
                if let Some(from) = self.c.eat("from") {
                    ch.push(from);
                    ch.push(self.test()?);
                }
            }
            return Ok(self.node("raise_statement", ch));
        }
        if self.c.is("global") || self.c.is("nonlocal") {
            let kind = format!("{}_statement", self.c.peek().text);
            let mut ch = vec![self.c.bump(), self.c.expect_ident()?];
            while let Some(comma) = self.c.eat(",") {
                ch.push(comma);
                ch.push(self.c.expect_ident()?);
            }
            return Ok(self.node(&kind, ch));
        }
        if self.c.is("del") {
            let kw = self.c.bump();
            let targets = self.target_list()?;
            return Ok(self.node("delete_statement", vec![kw, targets]));
        }
        if self.c.is("assert") {
            let mut ch = vec![self.c.bump(), self.test()?];
            if let Some(comma) = self.c.eat(",") {
                ch.push(comma);
                ch.push(self.test()?);
            }
            return Ok(self.node("assert_statement", ch));
        }
        if self.c.is("import") {
            let mut ch = vec![self.c.bump()];
            loop {
                ch.push(self.dotted_as_name()?);
                match self.c.eat(",") {
                    Some(comma) => ch.push(comma),
                    None => break,
                }
            }
            return Ok(self.node("import_statement", ch));
        }
        if self.c.is("from") {
            return self.import_from();
        }
        self.expr_stmt()
    }

    fn dotted_name(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut ch = vec![self.c.expect_ident()?];
        while self.c.is(".") {
            ch.push(self.c.bump());
            ch.push(self.c.expect_ident()?);
        }
        Ok(ch)
    }

    fn dotted_as_name(&mut self) -> PResult {
        let mut ch = self.dotted_name()?;
        let bound = if let Some(kw) = self.c.eat("as") {
            ch.push(kw);
            let alias = self.c.expect_ident()?;
            ch.push(alias);
            alias
        } else {
            ch[0]
        };
        self.c.b.set_role(bound, Role::Def { value: None });
        Ok(self.node("dotted_name", ch))
    }

    fn import_from(&mut self) -> PResult {
        let mut ch = vec![self.c.bump()];
        let mut has_module = false;
        while self.c.is(".") || self.c.is("...") {
            ch.push(self.c.bump());
            has_module = true;
        }
        if self.c.class() == Class::Ident {
            let m = self.dotted_name()?;
            ch.push(self.node("dotted_name", m));
            has_module = true;
        }
        if !has_module {
            return self.c.err("expected module name");
        }
        ch.push(self.c.expect("import")?);
        if self.c.is("*") {
            ch.push(self.c.bump());
        } else {
            let paren = self.c.eat("(");
            ch.extend(paren);
            loop {
                let name = self.c.expect_ident()?;
                let mut n = vec![name];
                let mut bound = name;
                if let Some(kw) = self.c.eat("as") {
                    n.push(kw);
                    bound = self.c.expect_ident()?;
                    n.push(bound);
                }
                self.c.b.set_role(bound, Role::Def { value: None });
                ch.push(self.node("import_name", n));
                match self.c.eat(",") {
                    Some(comma) => ch.push(comma),
                    None => break,
                }
                if paren.is_some() && self.c.is(")") {
                    break;
                }
            }
            if paren.is_some() {
                ch.push(self.c.expect(")")?);
            }
        }
        Ok(self.node("import_from_statement", ch))
    }

    fn expr_stmt(&mut self) -> PResult {
        if self.c.is("yield") {
            let y = self.yield_expr()?;
            return Ok(self.node("expression_statement", vec![y]));
        }
        let first = self.testlist(true)?;
        if self.c.is(":") {
            let colon = self.c.bump();
            let ann = self.test()?;
            let mut ch = vec![first, colon, ann];
            let mut value = None;
            if let Some(eq) = self.c.eat("=") {
                ch.push(eq);
                let v = self.yield_or_testlist()?;
                ch.push(v);
                value = Some(v);
            }
            self.c.b.mark_targets(first, value, GROUPING);
            return Ok(self.node("annotated_assignment", ch));
        }
        if self.is_any(AUG_OPS) {
            let op = self.c.bump();
            let rhs = self.yield_or_testlist()?;
            self.c.b.mark_targets(first, Some(rhs), GROUPING);
            return Ok(self.node("augmented_assignment", vec![first, op, rhs]));
        }
        if !self.c.is("=") {
            return Ok(self.node("expression_statement", vec![first]));
        }
        let mut ch = vec![first];
        let mut targets = vec![first];
        while let Some(eq) = self.c.eat("=") {
            ch.push(eq);
            let next = self.yield_or_testlist()?;
            ch.push(next);
            targets.push(next);
        }
        let value = targets.pop();
        for t in targets {
            self.c.b.mark_targets(t, value, GROUPING);
        }
        Ok(self.node("assignment", ch))
    }

    fn yield_or_testlist(&mut self) -> PResult {
        if self.c.is("yield") {
            self.yield_expr()
        } else {
            self.testlist(true)
        }
    }

    fn yield_expr(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("yield")?];
        if let Some(from) = self.c.eat("from") {
            ch.push(from);
            ch.push(self.test()?);
        } else if self.starts_expr() {
            ch.push(self.testlist(true)?);
        }
        Ok(self.node("yield", ch))
    }

    fn if_stmt(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.named_test()?, self.c.expect(":")?, self.suite()?];
        while self.c.is("elif") {
            let clause = vec![self.c.bump(), self.named_test()?, self.c.expect(":")?, self.suite()?];
            ch.push(self.node("elif_clause", clause));
        }
        if let Some(e) = self.else_clause()? {
            ch.push(e);
        }
        Ok(self.node("if_statement", ch))
    }

    fn else_clause(&mut self) -> Result<Option<NodeId>, ParseError> {
        if !self.c.is("else") {
            return Ok(None);
        }
        let clause = vec![self.c.bump(), self.c.expect(":")?, self.suite()?];
        Ok(Some(self.node("else_clause", clause)))
    }

    fn while_stmt(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.named_test()?, self.c.expect(":")?, self.suite()?];
        ch.extend(self.else_clause()?);
        Ok(self.node("while_statement", ch))
    }

    fn for_stmt(&mut self, async_kw: Option<NodeId>) -> PResult {
        let mut ch: Vec<NodeId> = async_kw.into_iter().collect();
        ch.push(self.c.expect("for")?);
        let targets = self.target_list()?;
        ch.push(targets);
        ch.push(self.c.expect("in")?);
        let iter = self.testlist(true)?;
        self.c.b.mark_targets(targets, Some(iter), GROUPING);
        ch.push(iter);
        ch.push(self.c.expect(":")?);
        ch.push(self.suite()?);
        ch.extend(self.else_clause()?);
        Ok(self.node("for_statement", ch))
    }

    fn def_stmt(&mut self, async_kw: Option<NodeId>) -> PResult {
        let mut ch: Vec<NodeId> = async_kw.into_iter().collect();
        ch.push(self.c.expect("def")?);
        ch.push(self.c.expect_ident()?);
        ch.push(self.parameters("(", ")")?);
        if let Some(arrow) = self.c.eat("->") {
            ch.push(arrow);
            ch.push(self.test()?);
        }
        ch.push(self.c.expect(":")?);
        ch.push(self.suite()?);
        Ok(self.node("function_definition", ch))
    }

    /// Parameter list. For lambdas `open` is empty and `close` is `:`.
    fn parameters(&mut self, open: &str, close: &str) -> PResult {
        let lambda = open.is_empty();
        let mut ch = Vec::new();
        if !lambda {
            ch.push(self.c.expect(open)?);
        }
        while !self.c.is(close) {
            let mut p = Vec::new();
            if self.c.is("/") {
                p.push(self.c.bump());
            } else {
                let star = self.c.eat("**").or_else(|| self.c.eat("*"));
                p.extend(star);
                if star.is_none() || self.c.class() == Class::Ident {
                    let name = self.c.expect_ident()?;
                    p.push(name);
                    let mut value = None;
                    if !lambda && self.c.is(":") {
                        p.push(self.c.bump());
                        p.push(self.test()?);
                    }
                    if let Some(eq) = self.c.eat("=") {
                        p.push(eq);
                        let d = self.test()?;
                        p.push(d);
                        value = Some(d);
                    }
                    self.c.b.set_role(name, Role::Def { value });
                }
            }
            ch.push(self.node("parameter", p));
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
        }
        if !lambda {
            ch.push(self.c.expect(close)?);
        } else if ch.is_empty() {
            return self.c.err("empty lambda parameters");
        }
        Ok(self.node("parameters", ch))
    }

    fn class_stmt(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.c.expect_ident()?];
        if self.c.is("(") {
            ch.push(self.arglist()?);
        }
        ch.push(self.c.expect(":")?);
        ch.push(self.suite()?);
        Ok(self.node("class_definition", ch))
    }

    fn try_stmt(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.c.expect(":")?, self.suite()?];
        let mut handlers = 0;
        while self.c.is("except") {
            let mut clause = vec![self.c.bump()];
            if let Some(star) = self.c.eat("*") {
                clause.push(star);
            }
            if !self.c.is(":") {
                clause.push(self.test()?);
                if let Some(kw) = self.c.eat("as") {
                    clause.push(kw);
                    let name = self.c.expect_ident()?;
                    self.c.b.set_role(name, Role::Def { value: None });
                    clause.push(name);
                }
            }
            clause.push(self.c.expect(":")?);
            clause.push(self.suite()?);
            ch.push(self.node("except_clause", clause));
            handlers += 1;
        }
        ch.extend(self.else_clause()?);
        if self.c.is("finally") {
            let clause = vec![self.c.bump(), self.c.expect(":")?, self.suite()?];
            ch.push(self.node("finally_clause", clause));
            handlers += 1;
        }
        if handlers == 0 {
            return self.c.err("expected `except` or `finally`");
        }
        Ok(self.node("try_statement", ch))
    }

    fn with_stmt(&mut self, async_kw: Option<NodeId>) -> PResult {
        let mut ch: Vec<NodeId> = async_kw.into_iter().collect();
        ch.push(self.c.expect("with")?);
        loop {
            let ctx = self.test()?;
            let mut item = vec![ctx];
            if let Some(kw) = self.c.eat("as") {
                item.push(kw);
                let target = self.atom_expr()?;
                self.c.b.mark_targets(target, Some(ctx), GROUPING);
                item.push(target);
            }
            ch.push(self.node("with_item", item));
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
        }
        ch.push(self.c.expect(":")?);
        ch.push(self.suite()?);
        Ok(self.node("with_statement", ch))
    }

    fn decorated(&mut self) -> PResult {
        let mut ch = Vec::new();
        while self.c.is("@") {
            let at = self.c.bump();
            let e = self.named_test()?;
            ch.push(self.node("decorator", vec![at, e]));
            self.expect_newline()?;
        }
        ch.push(if self.c.is("def") {
            self.def_stmt(None)?
        } else if self.c.is("class") {
            self.class_stmt()?
        } else if self.c.is("async") {
            let kw = self.c.bump();
            self.def_stmt(Some(kw))?
        } else {
            return self.c.err("expected `def` or `class` after decorator");
        });
        Ok(self.node("decorated_definition", ch))
    }

    // ---- expressions ----

    /// Comma-separated tests; a single element is returned unwrapped.
    fn testlist(&mut self, allow_star: bool) -> PResult {
        let first = self.test_or_star(allow_star)?;
        if !self.c.is(",") {
            return Ok(first);
        }
        let mut ch = vec![first];
        while self.c.is(",") {
            ch.push(self.c.bump());
            if !self.starts_expr() {
                break;
            }
            ch.push(self.test_or_star(allow_star)?);
        }
        Ok(self.node("tuple", ch))
    }

    fn test_or_star(&mut self, allow_star: bool) -> PResult {
        if allow_star && self.c.is("*") {
            let star = self.c.bump();
            let e = self.bitor()?;
            return Ok(self.node("starred", vec![star, e]));
        }
        self.test()
    }

    /// Targets of `for`/`del`: expressions without comparisons.
    fn target_list(&mut self) -> PResult {
        let first = self.target()?;
        if !self.c.is(",") {
            return Ok(first);
        }
        let mut ch = vec![first];
        while self.c.is(",") {
            ch.push(self.c.bump());
            if self.c.is("in") || self.c.is("=") || matches!(self.c.class(), Class::Newline) {
                break;
            }
            ch.push(self.target()?);
        }
        Ok(self.node("tuple", ch))
    }

    fn target(&mut self) -> PResult {
        if self.c.is("*") {
            let star = self.c.bump();
            let e = self.bitor()?;
            return Ok(self.node("starred", vec![star, e]));
        }
        self.bitor()
    }

    fn named_test(&mut self) -> PResult {
        if self.c.class() == Class::Ident && self.c.is_at(1, ":=") {
            let name = self.c.bump();
            let op = self.c.bump();
            let value = self.test()?;
            self.c.b.set_role(name, Role::Def { value: Some(value) });
            return Ok(self.node("named_expression", vec![name, op, value]));
        }
        self.test()
    }

    fn test(&mut self) -> PResult {
        if self.c.is("lambda") {
            return self.lambda();
        }
        let body = self.or_test()?;
        if !self.c.is("if") {
            return Ok(body);
        }
        let kw_if = self.c.bump();
        let cond = self.or_test()?;
        let kw_else = self.c.expect("else")?;
        let other = self.test()?;
        Ok(self.node("conditional_expression", vec![body, kw_if, cond, kw_else, other]))
    }

    fn lambda(&mut self) -> PResult {
        let kw = self.c.expect("lambda")?;
        let mut ch = vec![kw];
        if !self.c.is(":") {
            ch.push(self.parameters("", ":")?);
        }
        ch.push(self.c.expect(":")?);
        ch.push(self.test()?);
        Ok(self.node("lambda", ch))
    }

    fn or_test(&mut self) -> PResult {
        let mut left = self.and_test()?;
        while self.c.is("or") {
            let op = self.c.bump();
            let right = self.and_test()?;
            left = self.node("boolean_operator", vec![left, op, right]);
        }
        Ok(left)
    }

    fn and_test(&mut self) -> PResult {
        let mut left = self.not_test()?;
        while self.c.is("and") {
            let op = self.c.bump();
            let right = self.not_test()?;
            left = self.node("boolean_operator", vec![left, op, right]);
        }
        Ok(left)
    }

    fn not_test(&mut self) -> PResult {
        if self.c.is("not") {
            let op = self.c.bump();
            let e = self.not_test()?;
            return Ok(self.node("not_operator", vec![op, e]));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> PResult {
        let first = self.bitor()?;
        let mut ch = vec![first];
        loop {
            if self.is_any(&["<", ">", "==", ">=", "<=", "!=", "in"]) {
                ch.push(self.c.bump());
            } else if self.c.is("not") && self.c.is_at(1, "in") {
                ch.push(self.c.bump());
                ch.push(self.c.bump());
            } else if self.c.is("is") {
                ch.push(self.c.bump());
                if let Some(not) = self.c.eat("not") {
                    ch.push(not);
                }
            } else {
                break;
            }
            ch.push(self.bitor()?);
        }
        if ch.len() == 1 {
            return Ok(first);
        }
        Ok(self.node("comparison_operator", ch))
    }

    fn binary_level(&mut self, level: usize) -> PResult {
        const LEVELS: &[&[&str]] = &[
            &["|"],
            &["^"],
            &["&"],
            &["<<", ">>"],
            &["+", "-"],
            &["*", "/", "//", "%", "@"],
        ];
        if level == LEVELS.len() {
            return self.factor();
        }
        let mut left = self.binary_level(level + 1)?;
        while self.is_any(LEVELS[level]) {
            let op = self.c.bump();
            let right = self.binary_level(level + 1)?;
            left = self.node("binary_operator", vec![left, op, right]);
        }
        Ok(left)
    }

    fn bitor(&mut self) -> PResult {
        self.binary_level(0)
    }

    fn factor(&mut self) -> PResult {
        if self.is_any(&["+", "-", "~"]) {
            let op = self.c.bump();
            let e = self.factor()?;
            return Ok(self.node("unary_operator", vec![op, e]));
        }
        self.power()
    }

    fn power(&mut self) -> PResult {
        let base = if self.c.is("await") {
            let kw = self.c.bump();
            let e = self.atom_expr()?;
            self.node("await", vec![kw, e])
        } else {
            self.atom_expr()?
        };
        if self.c.is("**") {
            let op = self.c.bump();
            let exp = self.factor()?;
            return Ok(self.node("binary_operator", vec![base, op, exp]));
        }
        Ok(base)
    }

    fn atom_expr(&mut self) -> PResult {
        let mut e = self.atom()?;
        loop {
            if self.c.is("(") {
                if self.c.b.node(e).kind == "identifier" {
                    self.c.b.set_role(e, Role::Plain);
                }
                let args = self.arglist()?;
                e = self.node("call", vec![e, args]);
            } else if self.c.is("[") {
                let open = self.c.bump();
                let mut ch = vec![e, open];
                loop {
                    ch.push(self.subscript()?);
                    match self.c.eat(",") {
                        Some(comma) => ch.push(comma),
                        None => break,
                    }
                    if self.c.is("]") {
                        break;
                    }
                }
                ch.push(self.c.expect("]")?);
                e = self.node("subscript", ch);
            } else if self.c.is(".") {
                let dot = self.c.bump();
                let name = self.c.expect_ident()?;
                e = self.node("attribute", vec![e, dot, name]);
            } else {
                return Ok(e);
            }
        }
    }

    fn subscript(&mut self) -> PResult {
        let mut ch = Vec::new();
        if !self.c.is(":") {
            let t = self.test_or_star(true)?;
            if !self.c.is(":") {
                return Ok(t);
            }
            ch.push(t);
        }
        ch.push(self.c.expect(":")?);
        if !self.is_any(&[":", "]", ","]) {
            ch.push(self.test()?);
        }
        if let Some(colon) = self.c.eat(":") {
            ch.push(colon);
            if !self.is_any(&["]", ","]) {
                ch.push(self.test()?);
            }
        }
        Ok(self.node("slice", ch))
    }

    fn arglist(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("(")?];
        while !self.c.is(")") {
            let arg = if self.c.is("*") || self.c.is("**") {
                let star = self.c.bump();
                let e = self.test()?;
                self.node("unpacked_argument", vec![star, e])
            } else if self.c.class() == Class::Ident && self.c.is_at(1, "=") {
                let name = self.c.bump();
                let eq = self.c.bump();
                let value = self.test()?;
                self.node("keyword_argument", vec![name, eq, value])
            } else {
                let e = self.named_test()?;
                if self.is_any(&["for", "async"]) {
                    let mut g = vec![e];
                    g.extend(self.comp_clauses()?);
                    self.node("generator_expression", g)
                } else {
                    e
                }
            };
            ch.push(arg);
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
        }
        ch.push(self.c.expect(")")?);
        Ok(self.node("argument_list", ch))
    }

    fn comp_clauses(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut out = Vec::new();
        loop {
            if self.c.is("for") || self.c.is("async") {
                let mut ch = Vec::new();
                ch.extend(self.c.eat("async"));
                ch.push(self.c.expect("for")?);
                let targets = self.target_list()?;
                ch.push(targets);
                ch.push(self.c.expect("in")?);
                let iter = self.or_test()?;
                self.c.b.mark_targets(targets, Some(iter), GROUPING);
                ch.push(iter);
                out.push(self.node("for_in_clause", ch));
            } else if self.c.is("if") {
                let kw = self.c.bump();
                let cond = self.or_test()?;
                out.push(self.node("if_clause", vec![kw, cond]));
            } else {
                return Ok(out);
            }
        }
    }

    fn atom(&mut self) -> PResult {
        match self.c.class() {
            Class::Ident => {
                let name = self.c.bump();
                self.c.b.set_role(name, Role::Use);
                return Ok(name);
            }
            Class::Number => return Ok(self.c.bump()),
            Class::Str => {
                let first = self.c.bump();
                if self.c.class() != Class::Str {
                    return Ok(first);
                }
                let mut ch = vec![first];
                while self.c.class() == Class::Str {
                    ch.push(self.c.bump());
                }
                return Ok(self.node("concatenated_string", ch));
            }
            _ => {}
        }
        if self.is_any(&["None", "True", "False", "..."]) {
            return Ok(self.c.bump());
        }
        if self.c.is("(") {
            let open = self.c.bump();
            if let Some(close) = self.c.eat(")") {
                return Ok(self.node("tuple", vec![open, close]));
            }
            if self.c.is("yield") {
                let y = self.yield_expr()?;
                let close = self.c.expect(")")?;
                return Ok(self.node("parenthesized_expression", vec![open, y, close]));
            }
            let first = if self.c.is("*") {
                self.test_or_star(true)?
            } else {
                self.named_test()?
            };
            if self.is_any(&["for", "async"]) {
                let mut ch = vec![open, first];
                ch.extend(self.comp_clauses()?);
                ch.push(self.c.expect(")")?);
                return Ok(self.node("generator_expression", ch));
            }
            if self.c.is(",") {
                let mut ch = vec![open, first];
                while self.c.is(",") {
                    ch.push(self.c.bump());
                    if self.c.is(")") {
                        break;
                    }
                    ch.push(self.test_or_star(true)?);
                }
                ch.push(self.c.expect(")")?);
                return Ok(self.node("tuple", ch));
            }
            let close = self.c.expect(")")?;
            return Ok(self.node("parenthesized_expression", vec![open, first, close]));
        }
        if self.c.is("[") {
            let open = self.c.bump();
            let mut ch = vec![open];
            if !self.c.is("]") {
                let first = self.test_or_star(true)?;
                ch.push(first);
                if self.is_any(&["for", "async"]) {
                    ch.extend(self.comp_clauses()?);
                    ch.push(self.c.expect("]")?);
                    return Ok(self.node("list_comprehension", ch));
                }
                while self.c.is(",") {
                    ch.push(self.c.bump());
                    if self.c.is("]") {
                        break;
                    }
                    ch.push(self.test_or_star(true)?);
                }
            }
            ch.push(self.c.expect("]")?);
            return Ok(self.node("list", ch));
        }
        if self.c.is("{") {
            return self.dict_or_set();
        }
        self.c.err("expected expression")
    }

    fn dict_or_set(&mut self) -> PResult {
        let open = self.c.bump();
        let mut ch = vec![open];
        if let Some(close) = self.c.eat("}") {
            ch.push(close);
            return Ok(self.node("dictionary", ch));
        }
        let mut is_dict = false;
        let mut first = true;
        loop {
            let item = if self.c.is("**") {
                is_dict = true;
                let star = self.c.bump();
                let e = self.bitor()?;
                self.node("dictionary_splat", vec![star, e])
            } else {
                let key = self.test_or_star(true)?;
                if self.c.is(":") && (first || is_dict) {
                    is_dict = true;
                    let colon = self.c.bump();
                    let value = self.test()?;
                    self.node("pair", vec![key, colon, value])
                } else {
                    key
                }
            };
            ch.push(item);
            if first && self.is_any(&["for", "async"]) {
                ch.extend(self.comp_clauses()?);
                ch.push(self.c.expect("}")?);
                let kind = if is_dict {
                    "dictionary_comprehension"
                } else {
                    "set_comprehension"
                };
                return Ok(self.node(kind, ch));
            }
            first = false;
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
            if self.c.is("}") {
                break;
            }
        }
        ch.push(self.c.expect("}")?);
        Ok(self.node(if is_dict { "dictionary" } else { "set" }, ch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(src: &str) -> SyntaxTree {
        PythonParser.parse(src).unwrap_or_else(|e| panic!("{src:?}: {e}"))
    }

    fn bad(src: &str) {
        assert!(PythonParser.parse(src).is_err(), "should fail: {src:?}");
    }

    #[test]
    fn accepts_common_shapes() {
        ok("def add(a, b):\n    return a + b\n");
        ok("def f(x, *args, key=None, **kw) -> int:\n    \"\"\"Doc.\n    more\"\"\"\n    return x\n");
        ok("for i, (k, v) in enumerate(d.items()):\n    if k in seen and not v:\n        continue\n    elif v is not None:\n        total += v\n    else:\n        pass\n");
        ok("x = [y * 2 for y in range(10) if y % 2 == 0]\nz = {k: v for k, v in pairs}\ns = {1, 2}\n");
        ok("try:\n    f()\nexcept (IOError, ValueError) as e:\n    raise RuntimeError('x') from e\nfinally:\n    close()\n");
        ok("with open(p) as fh, lock:\n    data = fh.read()[1:-1]\n");
        ok("@decorator(arg)\nclass A(Base, metaclass=M):\n    def m(self):\n        return lambda x, y=1: x + y\n");
        ok("import os.path as osp, sys\nfrom . import a\nfrom ..b import (c, d as e,)\n");
        ok("a = b = c if d else e\nx: int = 3\nprint(*args, sep='')\ny = a[::2], -b ** 2\n");
        ok("if x: return 1\nwhile True:\n    x -= 1; break\n");
        ok("def f():\n    yield from g()\n    total = sum(x for x in xs)\n");
    }

    #[test]
    fn rejects_malformed() {
        bad("");
        bad("def f(:\n    pass\n");
        bad("def f():\nreturn 1\n");
        bad("if x:\n        a = 1\n    b = 2\n");
        bad("x = (1, 2\n");
        bad("x = 'unterminated\n");
        bad("return +\n");
        bad("for x in:\n    pass\n");
    }

    #[test]
    fn roles_mark_defs_and_uses() {
        let t = ok("def f(a):\n    b = a + 1\n    for c in b:\n        b = c\n    return g(b)\n");
        let mut defs = Vec::new();
        let mut uses = Vec::new();
        for l in t.leaves() {
            let n = t.node(l);
            match n.role {
                Role::Def { .. } => defs.push(n.text.clone().unwrap()),
                Role::Use => uses.push(n.text.clone().unwrap()),
                Role::Plain => {}
            }
        }
        assert_eq!(defs, ["a", "b", "c", "b"]);
        assert_eq!(uses, ["a", "b", "c", "b"]);
    }

    #[test]
    fn tuple_targets_are_defs() {
        let t = ok("a, b = b, a\n");
        let defs: Vec<_> = t
            .leaves()
            .into_iter()
            .filter(|&l| matches!(t.node(l).role, Role::Def { .. }))
            .map(|l| t.node(l).text.clone().unwrap())
            .collect();
        assert_eq!(defs, ["a", "b"]);
    }
}
