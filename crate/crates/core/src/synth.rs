//! Deterministic synthetic corpora used by the bundled fixtures and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CodeDoc, Split};

fn doc(id: String, nl: String, code: String, lang: &str, split: Split) -> CodeDoc {
    CodeDoc {
        id,
        nl,
        code,
        lang: lang.to_string(),
        split,
    }
}

const OPS: [(&str, &str); 10] = [
    ("add", "a + b"),
    ("subtract", "a - b"),
    ("multiply", "a * b"),
    ("divide", "a / b"),
    ("maximum", "a > b ? a : b"),
    ("minimum", "a < b ? a : b"),
    ("average", "(a + b) / 2"),
    ("distance", "a > b ? a - b : b - a"),
    ("remainder", "a % b"),
    ("squares", "a * a + b * b"),
];

const TYPES: [&str; 4] = ["int", "long", "double", "float"];

fn cap(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// 200 Java NL/code pairs: 10 arithmetic operations, 4 numeric types and
/// 5 code shapes. 140 train, 10 valid and 50 test, assigned by `seed`.
pub fn arithmetic_corpus(seed: u64) -> Vec<CodeDoc> {
    let mut rows = Vec::new();
    for (op, expr) in OPS {
        for ty in TYPES {
            let name = format!("{op}{}", cap(ty));
            let shapes = [
                (
                    format!("{op} two {ty} values"),
                    format!("{ty} {name}({ty} a, {ty} b) {{ return {expr}; }}"),
                ),
                (
                    format!("{op} two {ty} values into a local result"),
                    format!("{ty} {name}({ty} a, {ty} b) {{ {ty} result = {expr}; return result; }}"),
                ),
                (
                    format!("static helper to {op} two {ty} values"),
                    format!("static {ty} {name}({ty} a, {ty} b) {{ return {expr}; }}"),
                ),
                (
                    format!("{op} two {ty} values and log the call"),
                    format!("{ty} {name}({ty} a, {ty} b) {{ log(\"{op}\"); return {expr}; }}"),
                ),
                (
                    format!("{op} two {ty} values rejecting negative input"),
                    format!(
                        "{ty} {name}({ty} a, {ty} b) {{ if (a < 0 || b < 0) {{ throw new IllegalArgumentException(); }} return {expr}; }}"
                    ),
                ),
            ];
            for (k, (nl, code)) in shapes.into_iter().enumerate() {
                rows.push((format!("arith-{op}-{ty}-{k}"), nl, code));
            }
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; rows.len()];
    for &i in &order[..50] {
        split[i] = Split::Test;
    }
    for &i in &order[50..60] {
        split[i] = Split::Valid;
    }
    rows.into_iter()
        .zip(split)
        .map(|((id, nl, code), s)| doc(id, nl, code, "java", s))
        .collect()
}

const WORDS: [&str; 48] = [
    "parse", "read", "write", "file", "list", "sort", "merge", "map", "filter", "string", "number", "count", "user",
    "name", "path", "open", "close", "buffer", "stream", "json", "http", "request", "response", "cache", "key",
    "value", "table", "row", "column", "index", "search", "query", "token", "split", "join", "trim", "upper", "lower",
    "date", "time", "format", "config", "load", "save", "check", "valid", "error", "retry",
];

fn phrase(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

/// `n` random-phrase documents for retrieval checks.
pub fn retrieval_corpus(n: usize, seed: u64) -> Vec<CodeDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let nl = phrase(&mut rng, 3, 9);
            let split = [Split::Train, Split::Valid, Split::Test][i % 3];
            doc(format!("r{i:04}"), nl, format!("void f{i}() {{ }}"), "java", split)
        })
        .collect()
}

/// `n` random queries over the same vocabulary.
pub fn retrieval_queries(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| phrase(&mut rng, 2, 5)).collect()
}

/// Ten Java snippets; `bad-*` ids carry a syntax error.
pub fn syntax_fixture() -> Vec<CodeDoc> {
    let good = [
        "int add(int a, int b) { return a + b; }",
        "void greet(String name) { System.out.println(\"hi \" + name); }",
        "boolean isEmpty(List<String> xs) { return xs.size() == 0; }",
        "int sum(int[] xs) { int s = 0; for (int x : xs) { s += x; } return s; }",
        "String upper(String s) { if (s == null) { return null; } return s.toUpperCase(); }",
        "void loop() { int i = 0; while (i < 10) { i++; } }",
    ];
    let bad = [
        "int add(int a, int b) { return a + ; }",
        "void f( { }",
        "int g() { return 1 }",
        "class { int x; }",
    ];
    let mut out = Vec::new();
    for (i, c) in good.iter().enumerate() {
        out.push(doc(format!("good-{i}"), format!("valid snippet {i}"), c.to_string(), "java", Split::Train));
    }
    for (i, c) in bad.iter().enumerate() {
        out.push(doc(format!("bad-{i}"), format!("broken snippet {i}"), c.to_string(), "java", Split::Train));
    }
    out
}

/// The three-document BM25 example.
pub fn bm25_fixture() -> Vec<CodeDoc> {
    [
        ("d1", "add two numbers", "int add(int a, int b) { return a + b; }"),
        ("d2", "sort list", "void sort(List<Integer> xs) { Collections.sort(xs); }"),
        ("d3", "add numbers to list", "void addAll(List<Integer> xs, int a, int b) { xs.add(a); xs.add(b); }"),
    ]
    .into_iter()
    .map(|(id, nl, code)| doc(id.into(), nl.into(), code.into(), "java", Split::Train))
    .collect()
}

/// Twenty parseable snippets as `(lang, code)`.
pub fn parseable_snippets() -> Vec<(&'static str, &'static str)> {
    vec![
        ("java", "int add(int a, int b) { return a + b; }"),
        ("java", "int max(int a, int b) { if (a > b) { return a; } return b; }"),
        ("java", "void swap(int[] xs, int i, int j) { int t = xs[i]; xs[i] = xs[j]; xs[j] = t; }"),
        ("java", "int sum(int[] xs) { int s = 0; for (int i = 0; i < xs.length; i++) { s += xs[i]; } return s; }"),
        ("java", "String join(List<String> xs) { StringBuilder sb = new StringBuilder(); for (String x : xs) { sb.append(x); } return sb.toString(); }"),
        ("java", "boolean contains(List<Integer> xs, int v) { for (int x : xs) { if (x == v) { return true; } } return false; }"),
        ("java", "int fact(int n) { return n <= 1 ? 1 : n * fact(n - 1); }"),
        ("java", "void log(String msg) { System.out.println(msg); }"),
        ("java", "double mean(double[] xs) { double s = 0; for (double x : xs) { s += x; } return s / xs.length; }"),
        ("java", "int count(String s, char c) { int n = 0; for (char x : s.toCharArray()) { if (x == c) { n++; } } return n; }"),
        ("python", "def add(a, b):\n    return a + b\n"),
        ("python", "def mx(a, b):\n    if a > b:\n        return a\n    return b\n"),
        ("python", "def total(xs):\n    s = 0\n    for x in xs:\n        s += x\n    return s\n"),
        ("python", "def evens(xs):\n    return [x for x in xs if x % 2 == 0]\n"),
        ("python", "def fact(n):\n    return 1 if n <= 1 else n * fact(n - 1)\n"),
        ("python", "def greet(name):\n    print('hi ' + name)\n"),
        ("python", "def swap(xs, i, j):\n    xs[i], xs[j] = xs[j], xs[i]\n    return xs\n"),
        ("python", "def count(s, c):\n    n = 0\n    for x in s:\n        if x == c:\n            n += 1\n    return n\n"),
        ("python", "def keys(d):\n    return sorted(d.keys())\n"),
        ("python", "def safe_div(a, b):\n    try:\n        return a / b\n    except ZeroDivisionError:\n        return None\n"),
    ]
}

/// Retrieval-vs-generation fixture. For each test query the dense retriever
/// prefers a long near-copy of the reference, while BM25 prefers a short
/// snippet with a rare shared word and a generic method name.
pub fn preference_gap_corpus() -> Vec<CodeDoc> {
    let groups = [
        ("sum", "crate", "ledger", "a + b"),
        ("product", "bolt", "anvil", "a * b"),
        ("spread", "tide", "harbor", "a - b"),
    ];
    let mut out = Vec::new();
    for (i, (rare, g1, g2, expr)) in groups.iter().enumerate() {
        let name = format!("{g1}{}{}", cap(g2), cap(rare));
        let gt = format!("int {name}(int a, int b) {{ return {expr}; }}");
        out.push(doc(format!("gap-{i}-t"), format!("{g1} {g2} {rare}"), gt.clone(), "java", Split::Test));
        out.push(doc(
            format!("gap-{i}-l"),
            format!("{g1} {g2}"),
            format!("int {name}(int a, int b) {{ ; return {expr}; }}"),
            "java",
            Split::Train,
        ));
        out.push(doc(
            format!("gap-{i}-s"),
            rare.to_string(),
            format!("int helper(int a, int b) {{ return {expr}; }}"),
            "java",
            Split::Train,
        ));
        for (k, filler) in ["records", "stock", "audit", "notes"].iter().enumerate() {
            out.push(doc(
                format!("gap-{i}-b{k}"),
                format!("{g1} {g2} {filler}"),
                format!("void {filler}{}() {{ }}", cap(g1)),
                "java",
                if k == 0 { Split::Valid } else { Split::Train },
            ));
        }
    }
    out
}
