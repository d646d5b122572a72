//! Exact match, BLEU, CodeBLEU, Levenshtein distance and cosine similarity.
//!
//! Argument order is always `(candidate, reference)`. BLEU and CodeBLEU are
//! not symmetric; the brevity penalty and every "matched / total" ratio are
//! taken relative to the reference.
//!
//! ```
//! use rrg::metrics::{bleu, exact_match, levenshtein};
//! use rrg::tokenizer::lex_terms;
//!
//! assert!(exact_match("return a+b;", "return  a + b ;"));
//! let t = lex_terms("return a + b ;");
//! assert_eq!(bleu(&t, &t, 4), 1.0);
//! assert_eq!(levenshtein("kitten", "sitting"), 3);
//! ```

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{Parser, Role, SyntaxTree};
use crate::tokenizer::lex_terms;

/// Numerator floor for n-gram orders with no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
}

/// 1 iff the whitespace-free token sequences agree.
pub fn exact_match(candidate: &str, reference: &str) -> bool {
    lex_terms(candidate) == lex_terms(reference)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics for (weighted) BLEU. Summing stats over samples
/// gives corpus-level BLEU.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches per order (index 0 is unigrams).
    pub matches: Vec<f64>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<f64>,
    /// Reference n-gram totals per order.
    pub ref_totals: Vec<f64>,
    pub cand_len: f64,
    pub ref_len: f64,
}

impl BleuStats {
    fn zeros(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0.0; max_n],
            totals: vec![0.0; max_n],
            ref_totals: vec![0.0; max_n],
            cand_len: 0.0,
            ref_len: 0.0,
        }
    }

    pub fn add(&mut self, other: &BleuStats) {
        if self.matches.len() < other.matches.len() {
            let n = other.matches.len();
            self.matches.resize(n, 0.0);
            self.totals.resize(n, 0.0);
            self.ref_totals.resize(n, 0.0);
        }
        for i in 0..other.matches.len() {
            self.matches[i] += other.matches[i];
            self.totals[i] += other.totals[i];
            self.ref_totals[i] += other.ref_totals[i];
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// Smoothed geometric mean of precisions times the brevity penalty.
    ///
    /// Orders where neither side has an n-gram are left out of the mean. An
    /// order where only the reference has n-grams contributes `ε`.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0.0 && self.ref_len == 0.0 {
            return 1.0;
        }
        if self.cand_len == 0.0 || self.ref_len == 0.0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for i in 0..self.matches.len() {
            if self.totals[i] == 0.0 && self.ref_totals[i] == 0.0 {
                continue;
            }
            let p = self.matches[i].max(BLEU_EPSILON) / self.totals[i].max(1.0);
            log_sum += p.ln();
            orders += 1;
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len / self.cand_len).exp()
        };
        (bp * (log_sum / orders as f64).exp()).min(1.0)
    }
}

/// Per-sample BLEU statistics. `weight` scales unigrams only (used for the
/// keyword-weighted variant); `None` means uniform.
pub fn bleu_stats<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    max_n: usize,
    weight: Option<&dyn Fn(&T) -> f64>,
) -> BleuStats {
    let mut s = BleuStats::zeros(max_n);
    s.cand_len = candidate.len() as f64;
    s.ref_len = reference.len() as f64;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let w = |g: &[T]| match (n, weight) {
            (1, Some(f)) => f(&g[0]),
            _ => 1.0,
        };
        s.matches[n - 1] = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)) as f64 * w(g))
            .sum();
        s.totals[n - 1] = cand.iter().map(|(g, &c)| c as f64 * w(g)).sum();
        s.ref_totals[n - 1] = refs.values().sum::<usize>() as f64;
    }
    s
}

/// Sentence BLEU over pre-split tokens.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    bleu_stats(candidate, reference, max_n, None).score()
}

/// Corpus BLEU over `(candidate, reference)` texts: counts are summed before
/// the precisions are formed.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>, max_n: usize) -> f64 {
    let mut total = BleuStats::zeros(max_n);
    for (c, r) in pairs {
        total.add(&bleu_stats(&lex_terms(c), &lex_terms(r), max_n, None));
    }
    total.score()
}

/// Keyword-weighted n-gram statistics: keywords count 5x in unigram precision.
pub fn weighted_ngram_stats(candidate: &[String], reference: &[String], keywords: &[&str], max_n: usize) -> BleuStats {
    let w = |t: &String| if keywords.contains(&t.as_str()) { 5.0 } else { 1.0 };
    bleu_stats(candidate, reference, max_n, Some(&w))
}

/// Matched / total over the reference's subtrees of height ≥ 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub matched: f64,
    pub total: f64,
}

impl Ratio {
    pub fn value(self) -> f64 {
        if self.total == 0.0 {
            0.0
        } else {
            self.matched / self.total
        }
    }

    fn add(&mut self, o: Ratio) {
        self.matched += o.matched;
        self.total += o.total;
    }
}

fn multiset_overlap<T: Eq + Hash>(cand: &[T], reference: &[T]) -> Ratio {
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for c in cand {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut matched = 0;
    for r in reference {
        if let Some(n) = counts.get_mut(r) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    Ratio {
        matched: matched as f64,
        total: reference.len() as f64,
    }
}

pub fn syntax_match(candidate: &SyntaxTree, reference: &SyntaxTree) -> Ratio {
    multiset_overlap(&candidate.subtree_shapes(), &reference.subtree_shapes())
}

/// A normalized data-flow edge: `target` gets its value from `sources`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowEdge {
    pub target: String,
    pub relation: &'static str,
    pub sources: Vec<String>,
}

/// Def-use edges of a tree with variables renamed `var_0, var_1, ...` in
/// order of first appearance.
///
/// A use of `x` after a definition of `x` gives `x comesFrom x`; a definition
/// whose value reads `y, z` gives `x computedFrom y, z`. Definitions take
/// effect after their value expression, so `b = a + b` reads the older `b`.
pub fn dataflow_edges(tree: &SyntaxTree) -> Vec<FlowEdge> {
    let leaves = tree.leaves();
    let mut names: HashMap<String, String> = HashMap::new();
    let mut norm = |name: &str| -> String {
        let k = names.len();
        names.entry(name.to_string()).or_insert_with(|| format!("var_{k}")).clone()
    };
    for &l in &leaves {
        let n = tree.node(l);
        if !matches!(n.role, Role::Plain) {
            norm(n.text.as_deref().unwrap_or(""));
        }
    }
    let mut defined: HashMap<String, bool> = HashMap::new();
    let mut pending: Vec<(usize, String)> = Vec::new();
    let mut edges = Vec::new();
    for (i, &l) in leaves.iter().enumerate() {
        pending.retain(|(at, name)| {
            if *at <= i {
                defined.insert(name.clone(), true);
                false
            } else {
                true
            }
        });
        let n = tree.node(l);
        let name = n.text.clone().unwrap_or_default();
        match n.role {
            Role::Plain => {}
            Role::Use => {
                if defined.contains_key(&name) {
                    let v = norm(&name);
                    edges.push(FlowEdge {
                        target: v.clone(),
                        relation: "comesFrom",
                        sources: vec![v],
                    });
                }
            }
            Role::Def { value } => {
                let mut activate = i + 1;
                if let Some(value) = value {
                    let mut srcs = Vec::new();
                    tree.walk(value, &mut |id| {
                        let m = tree.node(id);
                        if m.is_leaf() && m.role == Role::Use {
                            srcs.push(norm(m.text.as_deref().unwrap_or("")));
                        }
                    });
                    srcs.sort();
                    srcs.dedup();
                    if !srcs.is_empty() {
                        edges.push(FlowEdge {
                            target: norm(&name),
                            relation: "computedFrom",
                            sources: srcs,
                        });
                    }
                    activate = activate.max(tree.node(value).span.1);
                }
                pending.push((activate, name));
            }
        }
    }
    edges
}

/// `None` when the reference has no edges (component absent).
pub fn dataflow_match(candidate: &SyntaxTree, reference: &SyntaxTree) -> Option<Ratio> {
    let r = dataflow_edges(reference);
    if r.is_empty() {
        return None;
    }
    Some(multiset_overlap(&dataflow_edges(candidate), &r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuWeights {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub syntax: f64,
    pub dataflow: f64,
}

impl Default for CodeBleuWeights {
    fn default() -> Self {
        CodeBleuWeights {
            ngram: 0.25,
            weighted_ngram: 0.25,
            syntax: 0.25,
            dataflow: 0.25,
        }
    }
}

/// Component scores; `None` marks an absent component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub syntax: Option<f64>,
    pub dataflow: Option<f64>,
}

impl Components {
    /// Weighted sum with weights renormalized over present components.
    pub fn combine(&self, w: &CodeBleuWeights) -> f64 {
        let mut num = w.ngram * self.ngram + w.weighted_ngram * self.weighted_ngram;
        let mut den = w.ngram + w.weighted_ngram;
        if let Some(s) = self.syntax {
            num += w.syntax * s;
            den += w.syntax;
        }
        if let Some(d) = self.dataflow {
            num += w.dataflow * d;
            den += w.dataflow;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Sufficient statistics for CodeBLEU; sum them for the corpus score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuStats {
    pub ngram: BleuStats,
    pub weighted: BleuStats,
    pub syntax: Option<Ratio>,
    pub dataflow: Option<Ratio>,
}

impl CodeBleuStats {
    pub fn add(&mut self, o: &CodeBleuStats) {
        self.ngram.add(&o.ngram);
        self.weighted.add(&o.weighted);
        for (mine, theirs) in [(&mut self.syntax, o.syntax), (&mut self.dataflow, o.dataflow)] {
            if let Some(t) = theirs {
                mine.get_or_insert_with(Ratio::default).add(t);
            }
        }
    }

    pub fn components(&self) -> Components {
        Components {
            ngram: self.ngram.score(),
            weighted_ngram: self.weighted.score(),
            syntax: self.syntax.map(Ratio::value),
            dataflow: self.dataflow.map(Ratio::value),
        }
    }
}

pub fn codebleu_stats(candidate: &str, reference: &str, parser: Option<&dyn Parser>) -> CodeBleuStats {
    let c = lex_terms(candidate);
    let r = lex_terms(reference);
    let keywords = parser.map(|p| p.keywords()).unwrap_or(&[]);
    let mut s = CodeBleuStats {
        ngram: bleu_stats(&c, &r, 4, None),
        weighted: weighted_ngram_stats(&c, &r, keywords, 4),
        syntax: None,
        dataflow: None,
    };
    let Some(parser) = parser else { return s };
    let Ok(rtree) = parser.parse(reference) else { return s };
    let ref_total = rtree.subtree_shapes().len() as f64;
    let ref_edges = dataflow_edges(&rtree).len() as f64;
    match parser.parse(candidate) {
        Ok(ctree) => {
            s.syntax = Some(syntax_match(&ctree, &rtree));
            s.dataflow = dataflow_match(&ctree, &rtree);
        }
        Err(_) => {
            s.syntax = Some(Ratio {
                matched: 0.0,
                total: ref_total,
            });
            s.dataflow = (ref_edges > 0.0).then_some(Ratio {
                matched: 0.0,
                total: ref_edges,
            });
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleu {
    pub score: f64,
    pub components: Components,
}

/// Sentence CodeBLEU. Without a parser, or when the reference does not
/// parse, the structural components are absent. A candidate that fails to
/// parse scores 0 on them.
pub fn codebleu(candidate: &str, reference: &str, parser: Option<&dyn Parser>, weights: &CodeBleuWeights) -> CodeBleu {
    let components = codebleu_stats(candidate, reference, parser).components();
    CodeBleu {
        score: components.combine(weights),
        components,
    }
}

/// Minimum number of single-character edits.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::DimensionMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// Corpus-level scores for a prediction set, all in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub em: f64,
    pub bleu: f64,
    pub codebleu: f64,
    pub components: Components,
    pub n: usize,
}

/// Score `(candidate, reference)` pairs. EM is the mean of per-sample
/// matches; BLEU and CodeBLEU aggregate counts across samples.
pub fn evaluate(pairs: &[(String, String)], parser: Option<&dyn Parser>, weights: &CodeBleuWeights) -> MetricReport {
    let per: Vec<(bool, CodeBleuStats)> = pairs
        .par_iter()
        .map(|(c, r)| (exact_match(c, r), codebleu_stats(c, r, parser)))
        .collect();
    let mut total = CodeBleuStats::default();
    let mut em = 0usize;
    for (m, s) in &per {
        em += usize::from(*m);
        total.add(s);
    }
    let components = total.components();
    MetricReport {
        em: if pairs.is_empty() { 0.0 } else { em as f64 / pairs.len() as f64 },
        bleu: components.ngram,
        codebleu: components.combine(weights),
        components,
        n: pairs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{JavaParser, PythonParser};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        lex_terms(s)
    }

    #[test]
    fn exact_match_normalizes_spacing() {
        assert!(exact_match("return a+b;", "return a+b;"));
        assert!(exact_match("if (x) {\n\treturn 1;\n}", "if (x) {\n    return 1;\n}"));
        assert!(!exact_match("return a+b;", "return a-b;"));
    }

    #[test]
    fn bleu_identity_and_edge_cases() {
        let t = toks("int f ( int a ) { return a ; }");
        assert_eq!(bleu(&t, &t, 4), 1.0);
        assert_eq!(bleu(&toks("x"), &toks("x"), 4), 1.0);
        let empty: Vec<String> = vec![];
        assert_eq!(bleu(&empty, &empty, 4), 1.0);
        assert_eq!(bleu(&empty, &t, 4), 0.0);
        assert_eq!(bleu(&t, &empty, 4), 0.0);
    }

    #[test]
    fn bleu_no_overlap_is_smoothing_floor() {
        let c = toks("a b c d e");
        let r = toks("v w x y z");
        // each order contributes ε / count; the geometric mean stays near ε
        let expect = ((1e-9f64 / 5.0).ln() + (1e-9f64 / 4.0).ln() + (1e-9f64 / 3.0).ln() + (1e-9f64 / 2.0).ln()) / 4.0;
        assert!((bleu(&c, &r, 4) - expect.exp()).abs() < 1e-15);
        assert!(bleu(&c, &r, 4) < 0.05);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = toks("a b c d e f g h");
        let c = toks("a b c d");
        assert!((bleu(&c, &r, 4) - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_sums_counts() {
        let pairs = [("a b c d", "a b c d"), ("x y", "x z")];
        let mut s = BleuStats::zeros(4);
        s.add(&bleu_stats(&toks("a b c d"), &toks("a b c d"), 4, None));
        s.add(&bleu_stats(&toks("x y"), &toks("x z"), 4, None));
        assert_eq!(corpus_bleu(pairs, 4), s.score());
        // unigrams 5/6, bigrams 3/4, trigrams 2/2, 4-grams 1/1
        let expect = ((5.0f64 / 6.0).ln() + (3.0f64 / 4.0).ln()) / 4.0;
        assert!((corpus_bleu(pairs, 4) - expect.exp()).abs() < 1e-12);
    }

    #[test]
    fn keywords_weigh_five_times() {
        let r = toks("return x");
        let c = toks("return y");
        let s = weighted_ngram_stats(&c, &r, &["return"], 1);
        assert_eq!(s.matches[0], 5.0);
        assert_eq!(s.totals[0], 6.0);
    }

    #[test]
    fn codebleu_identity_is_one() {
        let code = "int add(int a, int b) { int c = a + b; return c; }";
        let cb = codebleu(code, code, Some(&JavaParser), &CodeBleuWeights::default());
        assert_eq!(cb.score, 1.0);
        assert_eq!(cb.components.syntax, Some(1.0));
        assert_eq!(cb.components.dataflow, Some(1.0));
    }

    #[test]
    fn dataflow_absent_without_variables() {
        let code = "int one() { return 1; }";
        let cb = codebleu("int two() { return 2; }", code, Some(&JavaParser), &CodeBleuWeights::default());
        assert_eq!(cb.components.dataflow, None);
        let c = cb.components;
        let expect = (c.ngram + c.weighted_ngram + c.syntax.unwrap()) / 3.0;
        assert!((cb.score - expect).abs() < 1e-12);
    }

    #[test]
    fn renamed_identifiers_keep_syntax() {
        let a = "int f(int x) { return x * 2; }";
        let b = "int g(int y) { return y * 2; }";
        let cb = codebleu(a, b, Some(&JavaParser), &CodeBleuWeights::default());
        assert_eq!(cb.components.syntax, Some(1.0));
        assert_eq!(cb.components.dataflow, Some(1.0));
        assert!(cb.components.ngram < 1.0);
    }

    #[test]
    fn unparseable_candidate_zeroes_structure() {
        let r = "int f(int x) { return x; }";
        let cb = codebleu("int f(int x { return x; }", r, Some(&JavaParser), &CodeBleuWeights::default());
        assert_eq!(cb.components.syntax, Some(0.0));
        assert_eq!(cb.components.dataflow, Some(0.0));
    }

    #[test]
    fn dataflow_edges_follow_definitions() {
        let t = PythonParser.parse("def f(a):\n    b = a + 1\n    b = b * a\n    return b\n").unwrap();
        let e: Vec<String> = dataflow_edges(&t)
            .iter()
            .map(|e| format!("{} {} {}", e.target, e.relation, e.sources.join(",")))
            .collect();
        assert_eq!(
            e,
            [
                "var_1 computedFrom var_0",
                "var_0 comesFrom var_0",
                "var_1 computedFrom var_0,var_1",
                "var_1 comesFrom var_1",
                "var_0 comesFrom var_0",
                "var_1 comesFrom var_1",
            ]
        );
    }

    #[test]
    fn self_assignment_reads_old_value() {
        let t = PythonParser.parse("b = b + 1\n").unwrap();
        // `b` is not defined before the statement, so its read has no source
        assert!(dataflow_edges(&t).iter().all(|e| e.relation != "comesFrom"));
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("", "héllo"), 5);
    }

    #[test]
    fn cosine_cases() {
        let u = [1.0, 2.0, 3.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&u, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricError::ZeroVector));
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(MetricError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn report_em_is_mean_and_order_free() {
        let pairs: Vec<(String, String)> = [("a = 1", "a = 1"), ("b = 2", "b = 3"), ("c = 1", "c = 1")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let r = evaluate(&pairs, Some(&PythonParser), &CodeBleuWeights::default());
        assert!((r.em - 2.0 / 3.0).abs() < 1e-12);
        let mut rev = pairs.clone();
        rev.reverse();
        assert_eq!(evaluate(&rev, Some(&PythonParser), &CodeBleuWeights::default()), r);
    }

    fn word() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "x", "return", "+", "1", "(", ")", ";"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(c in prop::collection::vec(word(), 0..12), r in prop::collection::vec(word(), 0..12)) {
            let (cs, rs) = (c.join(" "), r.join(" "));
            let b = bleu(&c, &r, 4);
            prop_assert!((0.0..=1.0).contains(&b));
            let cb = codebleu(&cs, &rs, Some(&JavaParser), &CodeBleuWeights::default());
            prop_assert!((0.0..=1.0).contains(&cb.score));
            prop_assert!((0.0..=1.0).contains(&cb.components.weighted_ngram));
        }

        #[test]
        fn levenshtein_is_a_metric(a in "[ab]{0,8}", b in "[ab]{0,8}", c in "[ab]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
