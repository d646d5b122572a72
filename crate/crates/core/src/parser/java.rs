//! Java-like subset: classes, methods, fields, statements and expressions.
//!
//! Not covered: annotations declarations, switch arrows, generic method
//! invocation with explicit type arguments, anonymous array literals outside
//! declarations, and text blocks.

use super::lex::{match_op, scan_quoted, Class, Cursor, Tok};
use super::{NodeId, ParseError, Parser, Role, SyntaxTree};

pub struct JavaParser;

const KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "final", "finally", "float",
    "for", "goto", "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "return", "short", "static",
    "strictfp", "super", "switch", "synchronized", "this", "throw", "throws", "transient", "try",
    "void", "volatile", "while", "true", "false", "null",
];

const PRIMITIVES: &[&str] = &[
    "boolean", "byte", "char", "short", "int", "long", "float", "double", "void",
];

const MODIFIERS: &[&str] = &[
    "public", "private", "protected", "static", "final", "abstract", "synchronized", "native",
    "transient", "volatile", "strictfp", "default",
];

// `>` is never merged by the lexer so nested generics close cleanly; shifts
// are glued back together in the expression parser.
const OPS: &[&str] = &[
    "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=",
    "%=", "&=", "|=", "^=", "<<=", "<<", "(", ")", "{", "}", "[", "]", ";", ",", ".", "@", "=",
    ">", "<", "!", "~", "?", ":", "+", "-", "*", "/", "&", "|", "^", "%",
];

const ASSIGN_OPS: &[&str] = &["=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<="];

const BINARY_LEVELS: &[&[&str]] = &[
    &["||"],
    &["&&"],
    &["|"],
    &["^"],
    &["&"],
    &["==", "!="],
    &["<", ">", "<=", ">=", "instanceof"],
    &["<<", ">>", ">>>"],
    &["+", "-"],
    &["*", "/", "%"],
];

fn lex(src: &str) -> Result<Vec<Tok>, ParseError> {
    let mut toks = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    let mut line = 1;
    while i < src.len() {
        let c = src[i..].chars().next().unwrap();
        if c == '\n' {
            line += 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        if src[i..].starts_with("//") {
            while i < src.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if src[i..].starts_with("/*") {
            let end = src[i + 2..]
                .find("*/")
                .ok_or_else(|| ParseError::new(line, "unterminated comment"))?;
            line += src[i..i + 2 + end].matches('\n').count();
            i += end + 4;
            continue;
        }
        let start = i;
        let class;
        if c.is_alphabetic() || c == '_' || c == '$' {
            while i < src.len() {
                let d = src[i..].chars().next().unwrap();
                if d.is_alphanumeric() || d == '_' || d == '$' {
                    i += d.len_utf8();
                } else {
                    break;
                }
            }
            class = if KEYWORDS.contains(&&src[start..i]) {
                Class::Keyword
            } else {
                Class::Ident
            };
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
            i = scan_quoted(src, i, if c == '"' { "\"" } else { "'" }, false, line)?;
            class = Class::Str;
        } else if let Some(op) = match_op(&src[i..], OPS) {
            i += op.len();
            class = Class::Op;
        } else {
            return Err(ParseError::new(line, format!("unexpected character `{c}`")));
        }
        toks.push(Tok {
            class,
            text: src[start..i].to_string(),
            line,
            start,
            end: i,
        });
    }
    Ok(toks)
}

impl Parser for JavaParser {
    fn lang(&self) -> &str {
        "java"
    }

    fn parse(&self, code: &str) -> Result<SyntaxTree, ParseError> {
        let mut p = JavaGrammar { c: Cursor::new(lex(code)?) };
        let root = p.unit()?;
        Ok(p.c.b.finish(root))
    }

    fn keywords(&self) -> &[&'static str] {
        KEYWORDS
    }
}

struct JavaGrammar {
    c: Cursor,
}

type PResult = Result<NodeId, ParseError>;

impl JavaGrammar {
    fn attempt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, ParseError>) -> Option<T> {
        let m = self.c.mark();
        match f(self) {
            Ok(v) => Some(v),
            Err(_) => {
                self.c.reset(m);
                None
            }
        }
    }

    fn node(&mut self, kind: &str, children: Vec<NodeId>) -> NodeId {
        self.c.b.inner(kind, children)
    }

    fn is_any(&self, set: &[&str]) -> bool {
        set.iter().any(|s| self.c.is(s))
    }

    fn unit(&mut self) -> PResult {
        let mut items = Vec::new();
        while !self.c.at_eof() {
            let item = if self.c.is("package") || self.c.is("import") {
                self.header()?
            } else {
                self.member(false)?
            };
            items.push(item);
        }
        if items.is_empty() {
            return self.c.err("empty program");
        }
        Ok(self.node("program", items))
    }

    fn header(&mut self) -> PResult {
        let kind = if self.c.is("package") {
            "package_declaration"
        } else {
            "import_declaration"
        };
        let mut ch = vec![self.c.bump()];
        if let Some(s) = self.c.eat("static") {
            ch.push(s);
        }
        ch.push(self.c.expect_ident()?);
        while self.c.is(".") {
            ch.push(self.c.bump());
            if self.c.is("*") {
                ch.push(self.c.bump());
                break;
            }
            ch.push(self.c.expect_ident()?);
        }
        ch.push(self.c.expect(";")?);
        Ok(self.node(kind, ch))
    }

    fn annotation(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("@")?];
        ch.push(self.c.expect_ident()?);
        while self.c.is(".") {
            ch.push(self.c.bump());
            ch.push(self.c.expect_ident()?);
        }
        if self.c.is("(") {
            ch.push(self.c.bump());
            if !self.c.is(")") {
                ch.push(self.expr()?);
                while let Some(comma) = self.c.eat(",") {
                    ch.push(comma);
                    ch.push(self.expr()?);
                }
            }
            ch.push(self.c.expect(")")?);
        }
        Ok(self.node("annotation", ch))
    }

    fn modifiers(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut mods = Vec::new();
        loop {
            if self.c.is("@") && !self.c.is_at(1, "interface") {
                mods.push(self.annotation()?);
            } else if self.is_any(MODIFIERS) && !(self.c.is("default") && self.c.is_at(1, ":")) {
                mods.push(self.c.bump());
            } else {
                return Ok(mods);
            }
        }
    }

    /// Class member, or top-level item when `in_class` is false (which also
    /// admits bare statements so snippets parse).
    fn member(&mut self, in_class: bool) -> PResult {
        let start = self.c.mark();
        let mods = self.modifiers()?;
        if self.is_any(&["class", "interface", "enum"]) {
            return self.class_decl(mods);
        }
        if in_class && mods.is_empty() && self.c.is("{") {
            let b = self.block()?;
            return Ok(self.node("initializer", vec![b]));
        }
        if in_class && mods.iter().all(|&m| self.c.b.node(m).kind == "static") && self.c.is("{") {
            let mut ch = mods;
            ch.push(self.block()?);
            return Ok(self.node("initializer", ch));
        }
        let mods_for_attempt = mods.clone();
        if let Some(m) = self.attempt(|p| p.method_or_field(mods_for_attempt)) {
            return Ok(m);
        }
        if in_class {
            // Re-run to surface the member's own error.
            return self.method_or_field(mods);
        }
        self.c.reset(start);
        self.statement()
    }

    fn class_decl(&mut self, mut ch: Vec<NodeId>) -> PResult {
        let is_enum = self.c.is("enum");
        ch.push(self.c.bump());
        ch.push(self.c.expect_ident()?);
        if self.c.is("<") {
            ch.push(self.type_params()?);
        }
        for kw in ["extends", "implements"] {
            if self.c.is(kw) {
                let mut list = vec![self.c.bump(), self.ty()?];
                while let Some(comma) = self.c.eat(",") {
                    list.push(comma);
                    list.push(self.ty()?);
                }
                ch.push(self.node(if kw == "extends" { "superclass" } else { "interfaces" }, list));
            }
        }
        let mut body = vec![self.c.expect("{")?];
        if is_enum {
            while self.c.class() == Class::Ident {
                let mut constant = vec![self.c.bump()];
                if self.c.is("(") {
                    constant.push(self.args()?);
                }
                body.push(self.node("enum_constant", constant));
                match self.c.eat(",") {
                    Some(comma) => body.push(comma),
                    None => break,
                }
            }
            if let Some(semi) = self.c.eat(";") {
                body.push(semi);
            }
        }
        while !self.c.is("}") {
            if self.c.at_eof() {
                return self.c.err("expected `}`");
            }
            if let Some(semi) = self.c.eat(";") {
                body.push(semi);
                continue;
            }
            body.push(self.member(true)?);
        }
        body.push(self.c.bump());
        ch.push(self.node("class_body", body));
        let kind = if is_enum { "enum_declaration" } else { "class_declaration" };
        Ok(self.node(kind, ch))
    }

    fn type_params(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("<")?];
        loop {
            let mut tp = vec![self.c.expect_ident()?];
            if let Some(ext) = self.c.eat("extends") {
                tp.push(ext);
                tp.push(self.ty()?);
                while let Some(amp) = self.c.eat("&") {
                    tp.push(amp);
                    tp.push(self.ty()?);
                }
            }
            ch.push(self.node("type_parameter", tp));
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
        }
        ch.push(self.c.expect(">")?);
        Ok(self.node("type_parameters", ch))
    }

    fn method_or_field(&mut self, mut ch: Vec<NodeId>) -> PResult {
        if self.c.is("<") {
            ch.push(self.type_params()?);
        }
        // Constructor: Name '(' ...
        if self.c.class() == Class::Ident && self.c.is_at(1, "(") {
            ch.push(self.c.bump());
            ch.push(self.params()?);
            if self.c.is("throws") {
                ch.push(self.throws()?);
            }
            ch.push(self.block()?);
            return Ok(self.node("constructor_declaration", ch));
        }
        ch.push(self.ty()?);
        if self.c.class() == Class::Ident && self.c.is_at(1, "(") {
            ch.push(self.c.bump());
            ch.push(self.params()?);
            while self.c.is("[") {
                ch.push(self.c.bump());
                ch.push(self.c.expect("]")?);
            }
            if self.c.is("throws") {
                ch.push(self.throws()?);
            }
            if self.c.is("default") {
                ch.push(self.c.bump());
                ch.push(self.expr()?);
            }
            if let Some(semi) = self.c.eat(";") {
                ch.push(semi);
            } else {
                ch.push(self.block()?);
            }
            return Ok(self.node("method_declaration", ch));
        }
        ch.extend(self.declarators()?);
        ch.push(self.c.expect(";")?);
        Ok(self.node("field_declaration", ch))
    }

    fn throws(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("throws")?, self.ty()?];
        while let Some(comma) = self.c.eat(",") {
            ch.push(comma);
            ch.push(self.ty()?);
        }
        Ok(self.node("throws", ch))
    }

    fn params(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("(")?];
        if !self.c.is(")") {
            loop {
                let mut p = self.modifiers()?;
                p.push(self.ty()?);
                if let Some(dots) = self.c.eat("...") {
                    p.push(dots);
                }
                let name = self.c.expect_ident()?;
                self.c.b.set_role(name, Role::Def { value: None });
                p.push(name);
                while self.c.is("[") {
                    p.push(self.c.bump());
                    p.push(self.c.expect("]")?);
                }
                ch.push(self.node("formal_parameter", p));
                match self.c.eat(",") {
                    Some(comma) => ch.push(comma),
                    None => break,
                }
            }
        }
        ch.push(self.c.expect(")")?);
        Ok(self.node("formal_parameters", ch))
    }

    /// Type without array dimensions.
    fn ty_base(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut ch = Vec::new();
        if self.is_any(PRIMITIVES) {
            ch.push(self.c.bump());
            return Ok(ch);
        }
        ch.push(self.c.expect_ident()?);
        if self.c.is("<") {
            ch.push(self.type_args()?);
        }
        while self.c.is(".") && self.c.peek_at(1).class == Class::Ident {
            ch.push(self.c.bump());
            ch.push(self.c.bump());
            if self.c.is("<") {
                ch.push(self.type_args()?);
            }
        }
        Ok(ch)
    }

    fn ty(&mut self) -> PResult {
        let mut ch = self.ty_base()?;
        while self.c.is("[") && self.c.is_at(1, "]") {
            ch.push(self.c.bump());
            ch.push(self.c.bump());
        }
        Ok(self.node("type", ch))
    }

    fn type_args(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("<")?];
        if !self.c.is(">") {
            loop {
                if self.c.is("?") {
                    let mut w = vec![self.c.bump()];
                    if self.is_any(&["extends", "super"]) {
                        w.push(self.c.bump());
                        w.push(self.ty()?);
                    }
                    ch.push(self.node("wildcard", w));
                } else {
                    ch.push(self.ty()?);
                }
                match self.c.eat(",") {
                    Some(comma) => ch.push(comma),
                    None => break,
                }
            }
        }
        ch.push(self.c.expect(">")?);
        Ok(self.node("type_arguments", ch))
    }

    fn declarators(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut out = Vec::new();
        loop {
            let name = self.c.expect_ident()?;
            let mut d = vec![name];
            while self.c.is("[") {
                d.push(self.c.bump());
                d.push(self.c.expect("]")?);
            }
            let mut value = None;
            if let Some(eq) = self.c.eat("=") {
                d.push(eq);
                let init = if self.c.is("{") {
                    self.array_init()?
                } else {
                    self.expr()?
                };
                value = Some(init);
                d.push(init);
            }
            self.c.b.set_role(name, Role::Def { value });
            out.push(self.node("variable_declarator", d));
            match self.c.eat(",") {
                Some(comma) => out.push(comma),
                None => return Ok(out),
            }
        }
    }

    fn array_init(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("{")?];
        while !self.c.is("}") {
            ch.push(if self.c.is("{") {
                self.array_init()?
            } else {
                self.expr()?
            });
            match self.c.eat(",") {
                Some(comma) => ch.push(comma),
                None => break,
            }
        }
        ch.push(self.c.expect("}")?);
        Ok(self.node("array_initializer", ch))
    }

    fn block(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("{")?];
        while !self.c.is("}") {
            if self.c.at_eof() {
                return self.c.err("expected `}`");
            }
            ch.push(self.statement()?);
        }
        ch.push(self.c.bump());
        Ok(self.node("block", ch))
    }

    fn local_var_decl(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut ch = self.modifiers()?;
        ch.push(self.ty()?);
        if self.c.class() != Class::Ident {
            return self.c.err("expected variable name");
        }
        ch.extend(self.declarators()?);
        Ok(ch)
    }

    fn paren_expr(&mut self) -> PResult {
        let open = self.c.expect("(")?;
        let e = self.expr()?;
        let close = self.c.expect(")")?;
        Ok(self.node("condition", vec![open, e, close]))
    }

    fn statement(&mut self) -> PResult {
        let c = &self.c;
        if c.is("{") {
            return self.block();
        }
        if c.is(";") {
            let s = self.c.bump();
            return Ok(self.node("empty_statement", vec![s]));
        }
        if c.class() == Class::Ident && c.is_at(1, ":") {
            let label = self.c.bump();
            let colon = self.c.bump();
            let body = self.statement()?;
            return Ok(self.node("labeled_statement", vec![label, colon, body]));
        }
        if c.is("if") {
            let mut ch = vec![self.c.bump(), self.paren_expr()?, self.statement()?];
            if let Some(e) = self.c.eat("else") {
                ch.push(e);
                ch.push(self.statement()?);
            }
            return Ok(self.node("if_statement", ch));
        }
        if c.is("while") {
            let ch = vec![self.c.bump(), self.paren_expr()?, self.statement()?];
            return Ok(self.node("while_statement", ch));
        }
        if c.is("do") {
            let mut ch = vec![self.c.bump(), self.statement()?];
            ch.push(self.c.expect("while")?);
            ch.push(self.paren_expr()?);
            ch.push(self.c.expect(";")?);
            return Ok(self.node("do_statement", ch));
        }
        if c.is("for") {
            return self.for_statement();
        }
        if c.is("return") || c.is("throw") {
            let kind = if c.is("return") {
                "return_statement"
            } else {
                "throw_statement"
            };
            let mut ch = vec![self.c.bump()];
            if !self.c.is(";") {
                ch.push(self.expr()?);
            }
            ch.push(self.c.expect(";")?);
            return Ok(self.node(kind, ch));
        }
        if c.is("break") || c.is("continue") {
            let kind = if c.is("break") {
                "break_statement"
            } else {
                "continue_statement"
            };
            let mut ch = vec![self.c.bump()];
            if self.c.class() == Class::Ident {
                ch.push(self.c.bump());
            }
            ch.push(self.c.expect(";")?);
            return Ok(self.node(kind, ch));
        }
        if c.is("assert") {
            let mut ch = vec![self.c.bump(), self.expr()?];
            if let Some(colon) = self.c.eat(":") {
                ch.push(colon);
                ch.push(self.expr()?);
            }
            ch.push(self.c.expect(";")?);
            return Ok(self.node("assert_statement", ch));
        }
        if c.is("try") {
            return self.try_statement();
        }
        if c.is("switch") {
            return self.switch_statement();
        }
        if c.is("synchronized") && c.is_at(1, "(") {
            let ch = vec![self.c.bump(), self.paren_expr()?, self.block()?];
            return Ok(self.node("synchronized_statement", ch));
        }
        if c.is("class") || c.is("interface") || c.is("enum") {
            return self.class_decl(Vec::new());
        }
        if let Some(mut ch) = self.attempt(|p| {
            let ch = p.local_var_decl()?;
            if !p.c.is(";") {
                return p.c.err("expected `;`");
            }
            Ok(ch)
        }) {
            ch.push(self.c.bump());
            return Ok(self.node("local_variable_declaration", ch));
        }
        let e = self.expr()?;
        let semi = self.c.expect(";")?;
        Ok(self.node("expression_statement", vec![e, semi]))
    }

    fn for_statement(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.c.expect("(")?];
        let each = self.attempt(|p| {
            let mut h = p.modifiers()?;
            h.push(p.ty()?);
            let name = p.c.expect_ident()?;
            h.push(name);
            h.push(p.c.expect(":")?);
            let iter = p.expr()?;
            p.c.b.set_role(name, Role::Def { value: Some(iter) });
            h.push(iter);
            Ok(h)
        });
        if let Some(h) = each {
            ch.extend(h);
            ch.push(self.c.expect(")")?);
            ch.push(self.statement()?);
            return Ok(self.node("enhanced_for_statement", ch));
        }
        if !self.c.is(";") {
            if let Some(decl) = self.attempt(|p| p.local_var_decl()) {
                ch.push(self.node("local_variable_declaration", decl));
            } else {
                ch.extend(self.expr_list()?);
            }
        }
        ch.push(self.c.expect(";")?);
        if !self.c.is(";") {
            ch.push(self.expr()?);
        }
        ch.push(self.c.expect(";")?);
        if !self.c.is(")") {
            ch.extend(self.expr_list()?);
        }
        ch.push(self.c.expect(")")?);
        ch.push(self.statement()?);
        Ok(self.node("for_statement", ch))
    }

    fn expr_list(&mut self) -> Result<Vec<NodeId>, ParseError> {
        let mut out = vec![self.expr()?];
        while let Some(comma) = self.c.eat(",") {
            out.push(comma);
            out.push(self.expr()?);
        }
        Ok(out)
    }

    fn try_statement(&mut self) -> PResult {
        let mut ch = vec![self.c.bump()];
        if self.c.is("(") {
            let mut res = vec![self.c.bump()];
            while !self.c.is(")") {
                let mut r = self.modifiers()?;
                r.push(self.ty()?);
                r.extend(self.declarators()?);
                res.push(self.node("resource", r));
                match self.c.eat(";") {
                    Some(semi) => res.push(semi),
                    None => break,
                }
            }
            res.push(self.c.expect(")")?);
            ch.push(self.node("resource_specification", res));
        }
        ch.push(self.block()?);
        let mut handlers = 0;
        while self.c.is("catch") {
            let mut cc = vec![self.c.bump(), self.c.expect("(")?];
            cc.extend(self.modifiers()?);
            cc.push(self.ty()?);
            while let Some(bar) = self.c.eat("|") {
                cc.push(bar);
                cc.push(self.ty()?);
            }
            let name = self.c.expect_ident()?;
            self.c.b.set_role(name, Role::Def { value: None });
            cc.push(name);
            cc.push(self.c.expect(")")?);
            cc.push(self.block()?);
            ch.push(self.node("catch_clause", cc));
            handlers += 1;
        }
        if self.c.is("finally") {
            let f = vec![self.c.bump(), self.block()?];
            ch.push(self.node("finally_clause", f));
            handlers += 1;
        }
        if handlers == 0 && self.c.b.node(ch[1]).kind != "resource_specification" {
            return self.c.err("expected `catch` or `finally`");
        }
        Ok(self.node("try_statement", ch))
    }

    fn switch_statement(&mut self) -> PResult {
        let mut ch = vec![self.c.bump(), self.paren_expr()?, self.c.expect("{")?];
        while !self.c.is("}") {
            let mut group = Vec::new();
            if self.c.is("case") {
                group.push(self.c.bump());
                group.extend(self.expr_list()?);
            } else if self.c.is("default") {
                group.push(self.c.bump());
            } else {
                return self.c.err("expected `case` or `default`");
            }
            group.push(self.c.expect(":")?);
            while !self.is_any(&["case", "default", "}"]) {
                if self.c.at_eof() {
                    return self.c.err("expected `}`");
                }
                group.push(self.statement()?);
            }
            ch.push(self.node("switch_group", group));
        }
        ch.push(self.c.bump());
        Ok(self.node("switch_statement", ch))
    }

    // ---- expressions ----

    fn expr(&mut self) -> PResult {
        if let Some(l) = self.attempt(|p| p.lambda()) {
            return Ok(l);
        }
        let lhs = self.ternary()?;
        let n = self.assign_op();
        if n == 0 {
            return Ok(lhs);
        }
        let mut ch = vec![lhs];
        for _ in 0..n {
            ch.push(self.c.bump());
        }
        let rhs = self.expr()?;
        ch.push(rhs);
        self.c.b.mark_targets(lhs, Some(rhs), &["parenthesized_expression"]);
        Ok(self.node("assignment_expression", ch))
    }

    /// Token count of an assignment operator at the cursor, 0 when absent.
    fn assign_op(&self) -> usize {
        if self.is_any(ASSIGN_OPS) {
            return 1;
        }
        // `>>=` and `>>>=` arrive as `>` `>=` and `>` `>` `>=`.
        if self.c.is(">") && self.c.adjacent(0) {
            if self.c.is_at(1, ">=") {
                return 2;
            }
            if self.c.is_at(1, ">") && self.c.adjacent(1) && self.c.is_at(2, ">=") {
                return 3;
            }
        }
        0
    }

    fn lambda(&mut self) -> PResult {
        let mut ch = Vec::new();
        if self.c.class() == Class::Ident && self.c.is_at(1, "->") {
            let name = self.c.bump();
            self.c.b.set_role(name, Role::Def { value: None });
            ch.push(name);
        } else {
            let mut ps = vec![self.c.expect("(")?];
            while !self.c.is(")") {
                if !(self.c.class() == Class::Ident && (self.c.is_at(1, ",") || self.c.is_at(1, ")"))) {
                    ps.extend(self.modifiers()?);
                    ps.push(self.ty()?);
                }
                let name = self.c.expect_ident()?;
                self.c.b.set_role(name, Role::Def { value: None });
                ps.push(name);
                match self.c.eat(",") {
                    Some(comma) => ps.push(comma),
                    None => break,
                }
            }
            ps.push(self.c.expect(")")?);
            ch.push(self.node("lambda_parameters", ps));
        }
        ch.push(self.c.expect("->")?);
        ch.push(if self.c.is("{") { self.block()? } else { self.expr()? });
        Ok(self.node("lambda_expression", ch))
    }

    fn ternary(&mut self) -> PResult {
        let cond = self.binary(0)?;
        if !self.c.is("?") {
            return Ok(cond);
        }
        let q = self.c.bump();
        let then = self.expr()?;
        let colon = self.c.expect(":")?;
        let other = if let Some(l) = self.attempt(|p| p.lambda()) {
            l
        } else {
            self.ternary()?
        };
        Ok(self.node("ternary_expression", vec![cond, q, then, colon, other]))
    }

    /// Binary operator at the cursor for precedence `level`, as a token count.
    fn binary_op(&self, level: usize) -> usize {
        let c = &self.c;
        let glued_gt = |k: usize| c.is_at(k, ">") && c.adjacent(k);
        if level == 7 {
            if c.is("<<") {
                return 1;
            }
            if glued_gt(0) && c.is_at(1, ">") {
                if glued_gt(1) && c.is_at(2, ">") {
                    // `>>>` unless it is `>>>=`.
                    return if c.adjacent(2) && c.is_at(3, "=") { 0 } else { 3 };
                }
                if c.adjacent(1) && (c.is_at(2, "=") || c.is_at(2, ">=")) {
                    return 0;
                }
                return 2;
            }
            return 0;
        }
        if level == 6 && c.is(">") && c.adjacent(0) && (c.is_at(1, ">") || c.is_at(1, ">=")) {
            return 0;
        }
        usize::from(BINARY_LEVELS[level].iter().any(|op| c.is(op)))
    }

    fn binary(&mut self, level: usize) -> PResult {
        if level == BINARY_LEVELS.len() {
            return self.unary();
        }
        let mut left = self.binary(level + 1)?;
        loop {
            let n = self.binary_op(level);
            if n == 0 {
                return Ok(left);
            }
            let mut ch = vec![left];
            let is_instanceof = self.c.is("instanceof");
            for _ in 0..n {
                ch.push(self.c.bump());
            }
            if is_instanceof {
                ch.push(self.ty()?);
                if self.c.class() == Class::Ident {
                    let name = self.c.bump();
                    self.c.b.set_role(name, Role::Def { value: None });
                    ch.push(name);
                }
                left = self.node("instanceof_expression", ch);
            } else {
                ch.push(self.binary(level + 1)?);
                left = self.node("binary_expression", ch);
            }
        }
    }

    fn unary(&mut self) -> PResult {
        if self.is_any(&["+", "-", "++", "--", "!", "~"]) {
            let op = self.c.bump();
            let e = self.unary()?;
            return Ok(self.node("unary_expression", vec![op, e]));
        }
        if self.c.is("(") {
            if let Some(cast) = self.attempt(|p| p.cast()) {
                return Ok(cast);
            }
        }
        self.postfix()
    }

    fn cast(&mut self) -> PResult {
        let open = self.c.expect("(")?;
        let primitive = self.is_any(PRIMITIVES);
        let t = self.ty()?;
        let close = self.c.expect(")")?;
        let next = self.c.peek();
        let operand_start = matches!(next.class, Class::Ident | Class::Number | Class::Str)
            || ["(", "!", "~", "this", "new", "super", "true", "false", "null"]
                .iter()
                .any(|s| self.c.is(s));
        if !primitive && !operand_start {
            return self.c.err("not a cast");
        }
        let e = self.unary()?;
        Ok(self.node("cast_expression", vec![open, t, close, e]))
    }

    fn args(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("(")?];
        if !self.c.is(")") {
            ch.extend(self.expr_list()?);
        }
        ch.push(self.c.expect(")")?);
        Ok(self.node("argument_list", ch))
    }

    fn postfix(&mut self) -> PResult {
        let mut e = self.primary()?;
        loop {
            if self.c.is(".") {
                let dot = self.c.bump();
                if self.c.is("class") || self.c.is("this") {
                    let kw = self.c.bump();
                    e = self.node("field_access", vec![e, dot, kw]);
                    continue;
                }
                if self.c.is("new") {
                    let creation = self.creator()?;
                    e = self.node("field_access", vec![e, dot, creation]);
                    continue;
                }
                let mut ch = vec![e, dot];
                if self.c.is("<") {
                    ch.push(self.type_args()?);
                }
                ch.push(self.c.expect_ident()?);
                if self.c.is("(") {
                    ch.push(self.args()?);
                    e = self.node("method_invocation", ch);
                } else {
                    e = self.node("field_access", ch);
                }
            } else if self.c.is("[") {
                let open = self.c.bump();
                let idx = self.expr()?;
                let close = self.c.expect("]")?;
                e = self.node("array_access", vec![e, open, idx, close]);
            } else if self.c.is("::") {
                let op = self.c.bump();
                let name = if self.c.is("new") {
                    self.c.bump()
                } else {
                    self.c.expect_ident()?
                };
                e = self.node("method_reference", vec![e, op, name]);
            } else if self.c.is("++") || self.c.is("--") {
                let op = self.c.bump();
                e = self.node("update_expression", vec![e, op]);
            } else {
                return Ok(e);
            }
        }
    }

    fn primary(&mut self) -> PResult {
        match self.c.class() {
            Class::Number | Class::Str => return Ok(self.c.bump()),
            Class::Ident => {
                let name = self.c.bump();
                if self.c.is("(") {
                    let a = self.args()?;
                    return Ok(self.node("method_invocation", vec![name, a]));
                }
                self.c.b.set_role(name, Role::Use);
                return Ok(name);
            }
            _ => {}
        }
        if self.is_any(&["true", "false", "null"]) {
            return Ok(self.c.bump());
        }
        if self.c.is("this") || self.c.is("super") {
            let kw = self.c.bump();
            if self.c.is("(") {
                let a = self.args()?;
                return Ok(self.node("explicit_constructor_invocation", vec![kw, a]));
            }
            return Ok(kw);
        }
        if self.c.is("(") {
            let open = self.c.bump();
            let e = self.expr()?;
            let close = self.c.expect(")")?;
            return Ok(self.node("parenthesized_expression", vec![open, e, close]));
        }
        if self.c.is("new") {
            return self.creator();
        }
        if self.is_any(PRIMITIVES) {
            // int.class, int[].class
            let t = self.ty()?;
            let dot = self.c.expect(".")?;
            let kw = self.c.expect("class")?;
            return Ok(self.node("class_literal", vec![t, dot, kw]));
        }
        self.c.err("expected expression")
    }

    fn creator(&mut self) -> PResult {
        let mut ch = vec![self.c.expect("new")?];
        let base = self.ty_base()?;
        ch.push(self.node("type", base));
        if self.c.is("[") {
            while self.c.is("[") {
                ch.push(self.c.bump());
                if !self.c.is("]") {
                    ch.push(self.expr()?);
                }
                ch.push(self.c.expect("]")?);
            }
            if self.c.is("{") {
                ch.push(self.array_init()?);
            }
            return Ok(self.node("array_creation_expression", ch));
        }
        ch.push(self.args()?);
        if self.c.is("{") {
            let mut body = vec![self.c.bump()];
            while !self.c.is("}") {
                if self.c.at_eof() {
                    return self.c.err("expected `}`");
                }
                body.push(self.member(true)?);
            }
            body.push(self.c.bump());
            ch.push(self.node("class_body", body));
        }
        Ok(self.node("object_creation_expression", ch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(src: &str) -> SyntaxTree {
        JavaParser.parse(src).unwrap_or_else(|e| panic!("{src}: {e}"))
    }

    fn bad(src: &str) {
        assert!(JavaParser.parse(src).is_err(), "should fail: {src}");
    }

    #[test]
    fn accepts_common_shapes() {
        ok("int add(int a, int b) { return a + b; }");
        ok("@Override public String toString() { return \"x\" + this.name; }");
        ok("public static <T extends Comparable<T>> List<List<T>> f(Map<String, ? extends T> m) throws IOException { return new ArrayList<>(); }");
        ok("void f() { for (int i = 0, j = 1; i < n; i++, j--) { x[i] = y >> 2; } }");
        ok("void f() { for (String s : names) if (s != null) count += s.length(); else break; }");
        ok("void f() { try (InputStream in = open()) { read(in); } catch (IOException | RuntimeException e) { log(e); } finally { close(); } }");
        ok("int f(Object o) { switch (k) { case 1: case 2: return 3; default: return (int) o; } }");
        ok("void f() { Runnable r = () -> run(); list.forEach(x -> System.out.println(x)); int[] a = new int[] {1, 2}; a[0] >>>= 1; }");
        ok("class A extends B implements C, D { private int x = 1; A(int x) { this.x = x; } static { init(); } }");
        ok("boolean f(Object o) { return o instanceof String && ((String) o).isEmpty() ? true : false; }");
        ok("return x;");
        ok("String s = cond ? a : b;");
    }

    #[test]
    fn rejects_malformed() {
        bad("");
        bad("int f(int a { return a; }");
        bad("int f() { return a + ; }");
        bad("int f() { return 1 }");
        bad("int f() { String s = \"open; }");
        bad("int f() { if (x) { return 1; }");
    }

    #[test]
    fn generics_close_without_shift_confusion() {
        let t = ok("Map<String, List<Integer>> m = new HashMap<>();");
        assert!(t.subtree_shapes().iter().any(|s| s.starts_with("(type_arguments")));
        let shift = ok("int x = a >> 2;");
        assert!(shift.subtree_shapes().iter().any(|s| s.contains("binary_expression identifier > > number")));
    }

    #[test]
    fn roles_mark_defs_and_uses() {
        let t = ok("int f(int a) { int b = a + 1; b = b * a; return g(b); }");
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
        assert_eq!(defs, ["a", "b", "b"]);
        assert_eq!(uses, ["a", "b", "a", "b"]);
    }
}
