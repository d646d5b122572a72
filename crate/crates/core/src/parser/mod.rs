//! Syntax trees and the parser plug-in registry.
//!
//! Two grammars are bundled: a Java-like subset ([`JavaParser`]) and an
//! indentation-based Python-like subset ([`PythonParser`]). Both produce the
//! same [`SyntaxTree`] shape, which is all the corpus filter and the
//! structural CodeBLEU components need. Other languages plug in by
//! implementing [`Parser`] and registering with a [`ParserRegistry`].

mod java;
mod lex;
mod python;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

pub use java::JavaParser;
pub use python::PythonParser;

pub type NodeId = usize;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn new(line: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

/// How an identifier leaf takes part in data flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Not a variable (method names, member names, types, keywords, ...).
    Plain,
    /// The variable is written here. `value` is the expression it is
    /// computed from, when there is one.
    Def { value: Option<NodeId> },
    /// The variable is read here.
    Use,
}

#[derive(Debug, Clone)]
pub struct Node {
    /// Grammar symbol for inner nodes; token class for leaves
    /// (`identifier`, `number`, `string`, or the keyword/operator itself).
    pub kind: String,
    pub children: Vec<NodeId>,
    /// Half-open range of significant token indices covered by the node.
    pub span: (usize, usize),
    /// Source text, leaves only.
    pub text: Option<String>,
    pub role: Role,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SyntaxTree {
    nodes: Vec<Node>,
    root: NodeId,
}

impl SyntaxTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaves in source order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.walk(self.root, &mut |id| {
            if self.nodes[id].is_leaf() {
                out.push(id);
            }
        });
        out
    }

    /// Pre-order traversal from `start`.
    pub fn walk(&self, start: NodeId, f: &mut impl FnMut(NodeId)) {
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            f(id);
            stack.extend(self.nodes[id].children.iter().rev().copied());
        }
    }

    /// Structural serialization of the subtree at `id`: node kinds only,
    /// so identifiers and literal values are abstracted away.
    pub fn shape(&self, id: NodeId) -> String {
        let mut out = String::new();
        self.write_shape(id, &mut out);
        out
    }

    fn write_shape(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        if node.is_leaf() {
            out.push_str(&node.kind);
            return;
        }
        out.push('(');
        out.push_str(&node.kind);
        for &c in &node.children {
            out.push(' ');
            self.write_shape(c, out);
        }
        out.push(')');
    }

    /// Shapes of every subtree of height at least one, in pre-order.
    pub fn subtree_shapes(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.walk(self.root, &mut |id| {
            if !self.nodes[id].is_leaf() {
                out.push(self.shape(id));
            }
        });
        out
    }
}

/// A language grammar usable for syntax filtering and structural metrics.
pub trait Parser: Send + Sync {
    fn lang(&self) -> &str;
    fn parse(&self, code: &str) -> Result<SyntaxTree, ParseError>;
    /// Reserved words, used to weight n-gram matches.
    fn keywords(&self) -> &[&'static str];
}

/// Language tag to parser lookup.
#[derive(Clone, Default)]
pub struct ParserRegistry {
    parsers: BTreeMap<String, Arc<dyn Parser>>,
}

impl std::fmt::Debug for ParserRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParserRegistry")
            .field("langs", &self.parsers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ParserRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with the bundled `java` and `python` grammars.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(JavaParser));
        r.register(Arc::new(PythonParser));
        r
    }

    pub fn register(&mut self, parser: Arc<dyn Parser>) {
        self.parsers.insert(parser.lang().to_string(), parser);
    }

    pub fn get(&self, lang: &str) -> Option<Arc<dyn Parser>> {
        self.parsers.get(lang).cloned()
    }
}

/// Arena builder shared by the bundled grammars. Speculative parses roll
/// back by truncating the arena.
#[derive(Default)]
pub(crate) struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    pub(crate) fn leaf(&mut self, kind: String, text: String, index: usize) -> NodeId {
        self.nodes.push(Node {
            kind,
            children: Vec::new(),
            span: (index, index + 1),
            text: Some(text),
            role: Role::Plain,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn inner(&mut self, kind: &str, children: Vec<NodeId>) -> NodeId {
        debug_assert!(!children.is_empty(), "inner node `{kind}` without children");
        let start = children.iter().map(|&c| self.nodes[c].span.0).min().unwrap_or(0);
        let end = children.iter().map(|&c| self.nodes[c].span.1).max().unwrap_or(0);
        self.nodes.push(Node {
            kind: kind.to_string(),
            children,
            span: (start, end),
            text: None,
            role: Role::Plain,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn set_role(&mut self, id: NodeId, role: Role) {
        self.nodes[id].role = role;
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub(crate) fn checkpoint(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn rollback(&mut self, checkpoint: usize) {
        self.nodes.truncate(checkpoint);
    }

    /// Mark assignment targets as definitions. Plain names become `Def`;
    /// tuple/list/parenthesized targets recurse; anything else (subscripts,
    /// attribute access) stays a read of its base.
    pub(crate) fn mark_targets(&mut self, target: NodeId, value: Option<NodeId>, grouping: &[&str]) {
        let node = &self.nodes[target];
        if node.is_leaf() {
            if node.kind == "identifier" {
                self.nodes[target].role = Role::Def { value };
            }
            return;
        }
        if grouping.contains(&node.kind.as_str()) {
            let children = node.children.clone();
            for c in children {
                self.mark_targets(c, value, grouping);
            }
        }
    }

    pub(crate) fn finish(self, root: NodeId) -> SyntaxTree {
        SyntaxTree {
            nodes: self.nodes,
            root,
        }
    }
}
