//! The refactorer: input assembly, the policy abstraction, decoding,
//! supervised training and policy files.
//!
//! A policy reads a [`RefactorState`] (query plus ranked retrieved code) and
//! emits code tokens one at a time from a state-dependent candidate set
//! until it emits EOS or reaches its budget.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::KnowledgeBase;
use crate::retrieval::RetrievalResult;
use crate::tokenizer::{Specials, TokenId, Tokenizer};

pub const DEFAULT_BLOCK_SIZE: usize = 512;
pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RefactorError {
    #[error("query needs {needed} tokens with its separator but the block holds {block}")]
    OversizedQuery { needed: usize, block: usize },
    #[error("no retrieval results to assemble")]
    NoResults,
    #[error("retrieved document `{0}` is not in the knowledge base")]
    UnknownDoc(String),
    #[error("token {token} at step {step} is not a candidate of this state")]
    ImpossibleAction { step: usize, token: TokenId },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible policy: {0}")]
    IncompatiblePolicy(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Policy input: the query and retrieved code in rank order, and their
/// concatenation `query QUERY_SEP code1 CODE_SEP code2 ...` within the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefactorState {
    pub query: Vec<TokenId>,
    /// Retrieved code after truncation; codes truncated to nothing are gone.
    pub retrieved: Vec<Vec<TokenId>>,
    pub assembled: Vec<TokenId>,
    pub doc_ids: Vec<String>,
    pub dense_scores: Vec<f64>,
}

impl RefactorState {
    /// Lay out and truncate. Tokens are removed from the tail of the lowest
    /// ranked code first; a code that empties is dropped with its separator.
    pub fn from_tokens(
        query: Vec<TokenId>,
        mut codes: Vec<Vec<TokenId>>,
        block_size: usize,
    ) -> Result<Self, RefactorError> {
        if query.len() + 1 > block_size {
            return Err(RefactorError::OversizedQuery {
                needed: query.len() + 1,
                block: block_size,
            });
        }
        codes.retain(|c| !c.is_empty());
        let total = |codes: &[Vec<TokenId>]| {
            query.len() + 1 + codes.iter().map(Vec::len).sum::<usize>() + codes.len().saturating_sub(1)
        };
        loop {
            let len = total(&codes);
            if len <= block_size {
                break;
            }
            let over = len - block_size;
            let last = codes.last_mut().expect("query fits, so some code overflows");
            if last.len() > over {
                last.truncate(last.len() - over);
            } else {
                codes.pop();
            }
        }
        let mut assembled = query.clone();
        assembled.push(Specials::QUERY_SEP);
        for (i, c) in codes.iter().enumerate() {
            if i > 0 {
                assembled.push(Specials::CODE_SEP);
            }
            assembled.extend_from_slice(c);
        }
        Ok(RefactorState {
            query,
            retrieved: codes,
            assembled,
            doc_ids: Vec::new(),
            dense_scores: Vec::new(),
        })
    }

    pub fn mean_dense_score(&self) -> f64 {
        if self.dense_scores.is_empty() {
            0.0
        } else {
            self.dense_scores.iter().sum::<f64>() / self.dense_scores.len() as f64
        }
    }
}

/// Build the refactorer input for `query` from ranked retrieval results.
pub fn assemble_refactor_input(
    tokenizer: &Tokenizer,
    query: &str,
    results: &[RetrievalResult],
    kb: &KnowledgeBase,
    block_size: usize,
) -> Result<RefactorState, RefactorError> {
    if results.is_empty() {
        return Err(RefactorError::NoResults);
    }
    let mut ranked: Vec<&RetrievalResult> = results.iter().collect();
    ranked.sort_by_key(|r| r.rank);
    let mut codes = Vec::new();
    for r in &ranked {
        let doc = kb.get(&r.doc_id).ok_or_else(|| RefactorError::UnknownDoc(r.doc_id.clone()))?;
        codes.push(tokenizer.tokenize(&doc.code));
    }
    let mut state = RefactorState::from_tokens(tokenizer.tokenize(query), codes, block_size)?;
    let kept = state.retrieved.len();
    state.doc_ids = ranked.iter().take(kept).map(|r| r.doc_id.clone()).collect();
    state.dense_scores = ranked.iter().map(|r| r.dense_score).collect();
    Ok(state)
}

/// Next-token distribution over a candidate set, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub candidates: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

impl Distribution {
    pub fn from_logits(candidates: Vec<TokenId>, logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Distribution {
            candidates,
            log_probs: logits.iter().map(|l| l - lse).collect(),
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn index_of(&self, token: TokenId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == token)
    }
}

/// Per-state view of a policy, built once and queried at every step.
pub trait StepScorer {
    fn contains(&self, token: TokenId) -> bool;
    fn distribution(&self, prefix: &[TokenId]) -> Distribution;
}

pub trait Policy: Send + Sync {
    fn scorer<'a>(&'a self, state: &'a RefactorState) -> Box<dyn StepScorer + 'a>;

    fn next_token_distribution(&self, state: &RefactorState, prefix: &[TokenId]) -> Distribution {
        self.scorer(state).distribution(prefix)
    }

    /// Hash of everything that determines the policy's outputs.
    fn fingerprint(&self) -> String;
}

/// A policy with a flat parameter vector and analytic log-prob gradients.
pub trait TrainablePolicy: Policy + Clone {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// `(log π(token_t | state, prefix_t), ∇ log π)` for each token of `seq`.
    fn token_logprob_grads(&self, state: &RefactorState, seq: &[TokenId]) -> Result<Vec<(f64, Vec<f64>)>, RefactorError>;
}

/// Linear softmax over hand-built pointer features.
///
/// Candidates are the distinct non-special tokens of the state, EOS, UNK
/// (the shared out-of-vocabulary candidate) and a fixed list of globally
/// frequent tokens. The aligned-continuation feature for rank `r` marks the
/// token that follows the longest suffix of the prefix found in code `r`
/// (or EOS when that suffix ends the code); `aligned_best` marks the one
/// continuation whose match is longest over all codes. Together they let the
/// policy copy and splice retrieved code. `exhausted` marks tokens already
/// emitted as often as any single code contains them.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPointerPolicy {
    weights: Vec<f64>,
    max_rank: usize,
    budget: usize,
    global: Vec<TokenId>,
    tokenizer_fingerprint: String,
}

/// Longest suffix match considered by the aligned-continuation feature.
const MAX_ALIGN: usize = 32;

impl LinearPointerPolicy {
    /// Zero weights, i.e. uniform over candidates.
    pub fn new(max_rank: usize, budget: usize, global: Vec<TokenId>, tokenizer_fingerprint: &str) -> Self {
        LinearPointerPolicy {
            weights: vec![0.0; Self::feature_names(max_rank).len()],
            max_rank,
            budget,
            global,
            tokenizer_fingerprint: tokenizer_fingerprint.to_string(),
        }
    }

    /// Build for `tokenizer` with its `top_m` most frequent pieces as global candidates.
    pub fn for_tokenizer(tokenizer: &Tokenizer, max_rank: usize, budget: usize, top_m: usize) -> Self {
        Self::new(max_rank, budget, tokenizer.most_frequent(top_m).collect(), &tokenizer.fingerprint())
    }

    pub fn feature_names(max_rank: usize) -> Vec<String> {
        let mut f = vec!["in_query".to_string()];
        f.extend((1..=max_rank).map(|r| format!("in_rank_{r}")));
        f.push("log_freq".into());
        f.push("bigram_continuation".into());
        f.extend((1..=max_rank).map(|r| format!("aligned_rank_{r}")));
        f.extend(["is_eos", "eos_position", "global_only", "is_oov", "aligned_best", "exhausted"].map(String::from));
        f
    }

    fn n_features(&self) -> usize {
        2 * self.max_rank + 9
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weight(&mut self, name: &str, value: f64) -> bool {
        match Self::feature_names(self.max_rank).iter().position(|n| n == name) {
            Some(i) => {
                self.weights[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn tokenizer_fingerprint(&self) -> &str {
        &self.tokenizer_fingerprint
    }

    fn prepare<'a>(&'a self, state: &'a RefactorState) -> LinearScorer<'a> {
        let r = self.max_rank;
        let nf = self.n_features();
        let mut set: BTreeSet<TokenId> = state
            .assembled
            .iter()
            .copied()
            .filter(|&t| !Specials::is_special(t))
            .collect();
        set.insert(Specials::EOS);
        set.insert(Specials::UNK);
        set.extend(self.global.iter().copied());
        let cands: Vec<TokenId> = set.into_iter().collect();
        let index: HashMap<TokenId, usize> = cands.iter().enumerate().map(|(i, &t)| (t, i)).collect();

        let mut freq: HashMap<TokenId, usize> = HashMap::new();
        for c in &state.retrieved {
            for &t in c {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut max_count: HashMap<TokenId, usize> = HashMap::new();
        for c in &state.retrieved {
            let mut here: HashMap<TokenId, usize> = HashMap::new();
            for &t in c {
                *here.entry(t).or_default() += 1;
            }
            for (t, n) in here {
                let m = max_count.entry(t).or_default();
                *m = (*m).max(n);
            }
        }
        let in_state: BTreeSet<TokenId> = state.assembled.iter().copied().collect();
        let global: BTreeSet<TokenId> = self.global.iter().copied().collect();
        let mut base = vec![0.0; cands.len() * nf];
        for (i, &t) in cands.iter().enumerate() {
            let row = &mut base[i * nf..(i + 1) * nf];
            row[0] = f64::from(u8::from(state.query.contains(&t)));
            for (k, code) in state.retrieved.iter().take(r).enumerate() {
                row[1 + k] = f64::from(u8::from(code.contains(&t)));
            }
            row[r + 1] = (1.0 + *freq.get(&t).unwrap_or(&0) as f64).ln();
            row[2 * r + 3] = f64::from(u8::from(t == Specials::EOS));
            row[2 * r + 5] = f64::from(u8::from(global.contains(&t) && !in_state.contains(&t)));
            row[2 * r + 6] = f64::from(u8::from(t == Specials::UNK));
        }

        // successor sets; QUERY_SEP keys the start of any code
        let mut follows: HashMap<TokenId, BTreeSet<usize>> = HashMap::new();
        for code in &state.retrieved {
            let mut prev = Specials::QUERY_SEP;
            for &t in code.iter().chain([Specials::EOS].iter()) {
                follows.entry(prev).or_default().insert(index[&t]);
                prev = t;
            }
        }
        LinearScorer {
            policy: self,
            state,
            cands,
            index,
            base,
            follows,
            max_count,
        }
    }
}

struct LinearScorer<'a> {
    policy: &'a LinearPointerPolicy,
    state: &'a RefactorState,
    cands: Vec<TokenId>,
    index: HashMap<TokenId, usize>,
    base: Vec<f64>,
    follows: HashMap<TokenId, BTreeSet<usize>>,
    /// Most occurrences of a token within any one retrieved code.
    max_count: HashMap<TokenId, usize>,
}

/// Length of the longest suffix of `prefix` found in `code`, and the
/// position right after it.
fn align(code: &[TokenId], prefix: &[TokenId]) -> Option<(usize, usize)> {
    let Some(&last) = prefix.last() else { return Some((0, 0)) };
    let mut best: Option<(usize, usize)> = None;
    for j in 0..code.len() {
        if code[j] != last {
            continue;
        }
        let mut l = 1;
        while l < MAX_ALIGN && l <= j && l < prefix.len() && code[j - l] == prefix[prefix.len() - 1 - l] {
            l += 1;
        }
        if best.is_none_or(|(bl, _)| l > bl) {
            best = Some((l, j));
        }
    }
    best.map(|(l, j)| (l, j + 1))
}

impl LinearScorer<'_> {
    /// Feature matrix (`candidates × features`, row-major) at `prefix`.
    fn features(&self, prefix: &[TokenId]) -> Vec<f64> {
        let r = self.policy.max_rank;
        let nf = self.policy.n_features();
        let mut phi = self.base.clone();
        let prev = prefix.last().copied().unwrap_or(Specials::QUERY_SEP);
        if let Some(next) = self.follows.get(&prev) {
            for &i in next {
                phi[i * nf + r + 2] = 1.0;
            }
        }
        let mut best: Option<(usize, TokenId)> = None;
        for (k, code) in self.state.retrieved.iter().take(r).enumerate() {
            if let Some((len, pos)) = align(code, prefix) {
                let t = code.get(pos).copied().unwrap_or(Specials::EOS);
                phi[self.index[&t] * nf + r + 3 + k] = 1.0;
                if best.is_none_or(|(bl, _)| len > bl) {
                    best = Some((len, t));
                }
            }
        }
        if let Some((_, t)) = best {
            phi[self.index[&t] * nf + 2 * r + 7] = 1.0;
        }
        let mut used: HashMap<TokenId, usize> = HashMap::new();
        for &t in prefix {
            *used.entry(t).or_default() += 1;
        }
        for (t, n) in used {
            if let Some(&i) = self.index.get(&t) {
                if n >= self.max_count.get(&t).copied().unwrap_or(0) {
                    phi[i * nf + 2 * r + 8] = 1.0;
                }
            }
        }
        let eos = self.index[&Specials::EOS];
        phi[eos * nf + 2 * r + 4] = prefix.len() as f64 / self.policy.budget.max(1) as f64;
        phi
    }

    fn logits(&self, phi: &[f64]) -> Vec<f64> {
        let nf = self.policy.n_features();
        phi.chunks(nf)
            .map(|row| row.iter().zip(&self.policy.weights).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl StepScorer for LinearScorer<'_> {
    fn contains(&self, token: TokenId) -> bool {
        self.index.contains_key(&token)
    }

    fn distribution(&self, prefix: &[TokenId]) -> Distribution {
        let phi = self.features(prefix);
        Distribution::from_logits(self.cands.clone(), &self.logits(&phi))
    }
}

impl Policy for LinearPointerPolicy {
    fn scorer<'a>(&'a self, state: &'a RefactorState) -> Box<dyn StepScorer + 'a> {
        Box::new(self.prepare(state))
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in Self::feature_names(self.max_rank) {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        for w in &self.weights {
            h.update(w.to_bits().to_le_bytes());
        }
        for g in &self.global {
            h.update(g.0.to_le_bytes());
        }
        h.update((self.budget as u64).to_le_bytes());
        h.update(self.tokenizer_fingerprint.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

impl TrainablePolicy for LinearPointerPolicy {
    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn token_logprob_grads(&self, state: &RefactorState, seq: &[TokenId]) -> Result<Vec<(f64, Vec<f64>)>, RefactorError> {
        let sc = self.prepare(state);
        let nf = self.n_features();
        let mut out = Vec::with_capacity(seq.len());
        for (step, &tok) in seq.iter().enumerate() {
            let y = *sc.index.get(&tok).ok_or(RefactorError::ImpossibleAction { step, token: tok })?;
            let phi = sc.features(&seq[..step]);
            let dist = Distribution::from_logits(Vec::new(), &sc.logits(&phi));
            let mut grad = phi[y * nf..(y + 1) * nf].to_vec();
            for (row, lp) in phi.chunks(nf).zip(&dist.log_probs) {
                let p = lp.exp();
                for (g, f) in grad.iter_mut().zip(row) {
                    *g -= p * f;
                }
            }
            out.push((dist.log_probs[y], grad));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

/// One emitted sequence with the log-prob of each token when it was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

impl ActionSequence {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// Tokens without the terminating EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&t) if t == Specials::EOS => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Emit tokens until EOS or `budget` tokens (EOS included).
pub fn decode<P: Policy + ?Sized>(
    policy: &P,
    state: &RefactorState,
    budget: usize,
    mode: DecodeMode,
    seed: u64,
) -> Result<ActionSequence, RefactorError> {
    if budget == 0 {
        return Err(RefactorError::Config("decode budget must be at least 1".into()));
    }
    let sc = policy.scorer(state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ActionSequence {
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    while out.tokens.len() < budget {
        let d = sc.distribution(&out.tokens);
        let i = match mode {
            DecodeMode::Greedy => {
                let mut best = 0;
                for (i, lp) in d.log_probs.iter().enumerate() {
                    if *lp > d.log_probs[best] {
                        best = i;
                    }
                }
                best
            }
            DecodeMode::Sample => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = d.log_probs.len() - 1;
                for (i, lp) in d.log_probs.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        out.tokens.push(d.candidates[i]);
        out.logprobs.push(d.log_probs[i]);
        if d.candidates[i] == Specials::EOS {
            break;
        }
    }
    Ok(out)
}

/// Total and per-token log-probability of `seq` under `policy`.
pub fn sequence_logprob<P: Policy + ?Sized>(
    policy: &P,
    state: &RefactorState,
    seq: &[TokenId],
) -> Result<(f64, Vec<f64>), RefactorError> {
    let sc = policy.scorer(state);
    let mut per = Vec::with_capacity(seq.len());
    for (step, &tok) in seq.iter().enumerate() {
        let d = sc.distribution(&seq[..step]);
        let i = d.index_of(tok).ok_or(RefactorError::ImpossibleAction { step, token: tok })?;
        per.push(d.log_probs[i]);
    }
    Ok((per.iter().sum(), per))
}

/// Gradient step rule applied to a loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Momentum {
        #[serde(default = "default_beta1")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for an [`Optimizer`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        OptimizerState {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descend along `grad` (the gradient of a loss).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 10,
            lr: 1e-5,
            batch: 16,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

/// A teacher-forcing pair. `target` ends with EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub state: RefactorState,
    pub target: Vec<TokenId>,
}

/// Target code tokens cut to `budget - 1` with EOS appended.
pub fn sft_target(code: &[TokenId], budget: usize) -> Vec<TokenId> {
    let keep = budget.saturating_sub(1);
    if code.len() > keep {
        log::warn!("target of {} tokens truncated to {keep} to fit the budget", code.len());
    }
    let mut t: Vec<TokenId> = code.iter().copied().take(keep).collect();
    t.push(Specials::EOS);
    t
}

/// Replace tokens the policy cannot emit in `state` with UNK.
pub fn map_oov<P: Policy + ?Sized>(policy: &P, state: &RefactorState, seq: &[TokenId]) -> (Vec<TokenId>, usize) {
    let sc = policy.scorer(state);
    let mut n = 0;
    let out = seq
        .iter()
        .map(|&t| {
            if sc.contains(t) {
                t
            } else {
                n += 1;
                Specials::UNK
            }
        })
        .collect();
    (out, n)
}

/// Cross-entropy of one example: mean token negative log-likelihood, and its gradient.
fn example_loss<P: TrainablePolicy>(policy: &P, ex: &SftExample) -> Result<(f64, Vec<f64>, usize), RefactorError> {
    let (target, oov) = map_oov(policy, &ex.state, &ex.target);
    let steps = policy.token_logprob_grads(&ex.state, &target)?;
    let t = steps.len().max(1) as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    for (lp, g) in steps {
        loss -= lp / t;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a -= b / t;
        }
    }
    Ok((loss, grad, oov))
}

/// Mean per-example loss over `batch`, its gradient and the OOV count.
pub fn sft_loss_and_grad<P: TrainablePolicy>(
    policy: &P,
    batch: &[SftExample],
) -> Result<(f64, Vec<f64>, usize), RefactorError> {
    let parts: Vec<_> = batch.par_iter().map(|ex| example_loss(policy, ex)).collect::<Result<_, _>>()?;
    let n = batch.len().max(1) as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut loss = 0.0;
    let mut oov = 0;
    for (l, g, o) in parts {
        loss += l / n;
        oov += o;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
    }
    Ok((loss, grad, oov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Dataset loss before the first update.
    pub initial_loss: f64,
    /// Running mean of batch losses within each epoch.
    pub epoch_losses: Vec<f64>,
    /// Dataset loss after the last update.
    pub final_loss: f64,
    /// Target tokens mapped to the OOV candidate (counted once per example).
    pub oov_tokens: usize,
}

/// Teacher-forced cross-entropy training.
pub fn sft_train<P: TrainablePolicy>(
    policy: &mut P,
    data: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftReport, RefactorError> {
    if data.is_empty() {
        return Err(RefactorError::Config("empty SFT dataset".into()));
    }
    if cfg.lr <= 0.0 || !cfg.lr.is_finite() {
        return Err(RefactorError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.batch == 0 {
        return Err(RefactorError::Config("batch size must be at least 1".into()));
    }
    let (initial_loss, _, oov_tokens) = sft_loss_and_grad(policy, data)?;
    if oov_tokens > 0 {
        log::warn!("{oov_tokens} target tokens are outside their candidate sets and train the OOV candidate");
    }
    let mut opt = OptimizerState::new(cfg.optimizer, policy.params().len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<SftExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grad, _) = sft_loss_and_grad(policy, &batch)?;
            opt.step(policy.params_mut(), &grad, cfg.lr);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("sft epoch {}: loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    let (final_loss, _, _) = sft_loss_and_grad(policy, data)?;
    Ok(SftReport {
        initial_loss,
        epoch_losses,
        final_loss,
        oov_tokens,
    })
}

/// On-disk policy document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub version: u32,
    pub kind: String,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub tokenizer_fingerprint: String,
    pub budget: usize,
    pub max_rank: usize,
    pub global_tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<serde_json::Value>,
}

const KIND: &str = "linear-pointer";

impl From<&LinearPointerPolicy> for PolicyFile {
    fn from(p: &LinearPointerPolicy) -> Self {
        PolicyFile {
            version: POLICY_FILE_VERSION,
            kind: KIND.into(),
            feature_names: LinearPointerPolicy::feature_names(p.max_rank),
            weights: p.weights.clone(),
            tokenizer_fingerprint: p.tokenizer_fingerprint.clone(),
            budget: p.budget,
            max_rank: p.max_rank,
            global_tokens: p.global.clone(),
            checkpoint: None,
        }
    }
}

impl TryFrom<PolicyFile> for LinearPointerPolicy {
    type Error = RefactorError;

    fn try_from(f: PolicyFile) -> Result<Self, RefactorError> {
        let bad = |m: String| Err(RefactorError::IncompatiblePolicy(m));
        if f.version != POLICY_FILE_VERSION {
            return bad(format!("file version {} (expected {POLICY_FILE_VERSION})", f.version));
        }
        if f.kind != KIND {
            return bad(format!("policy kind `{}`", f.kind));
        }
        if f.feature_names != LinearPointerPolicy::feature_names(f.max_rank) {
            return bad("feature set differs from this build".into());
        }
        if f.weights.len() != f.feature_names.len() || f.weights.iter().any(|w| !w.is_finite()) {
            return bad("weights missing or not finite".into());
        }
        Ok(LinearPointerPolicy {
            weights: f.weights,
            max_rank: f.max_rank,
            budget: f.budget,
            global: f.global_tokens,
            tokenizer_fingerprint: f.tokenizer_fingerprint,
        })
    }
}

/// Write a policy file; `checkpoint` carries optional training metadata.
pub fn save_policy(
    policy: &LinearPointerPolicy,
    path: &Path,
    checkpoint: Option<serde_json::Value>,
) -> Result<(), RefactorError> {
    let mut file = PolicyFile::from(policy);
    file.checkpoint = checkpoint;
    let body = serde_json::to_string_pretty(&file).expect("policy serializes");
    fs::write(path, body + "\n").map_err(|source| RefactorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_policy_file(path: &Path) -> Result<PolicyFile, RefactorError> {
    let body = fs::read_to_string(path).map_err(|source| RefactorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|e| RefactorError::IncompatiblePolicy(format!("{}: {e}", path.display())))
}

pub fn load_policy(path: &Path) -> Result<LinearPointerPolicy, RefactorError> {
    read_policy_file(path)?.try_into()
}

/// [`load_policy`] plus a check that the policy was trained with `tokenizer`.
/// Retriever and generator settings are free to differ.
pub fn load_policy_for(path: &Path, tokenizer: &Tokenizer) -> Result<LinearPointerPolicy, RefactorError> {
    let p = load_policy(path)?;
    if p.tokenizer_fingerprint != tokenizer.fingerprint() {
        return Err(RefactorError::IncompatiblePolicy(format!(
            "trained with tokenizer {} but loaded with {}",
            p.tokenizer_fingerprint,
            tokenizer.fingerprint()
        )));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&x| TokenId(x)).collect()
    }

    fn state(q: &[u32], codes: &[&[u32]]) -> RefactorState {
        RefactorState::from_tokens(ids(q), codes.iter().map(|c| ids(c)).collect(), 512).unwrap()
    }

    fn policy(weights: &[(&str, f64)]) -> LinearPointerPolicy {
        let mut p = LinearPointerPolicy::new(3, 64, ids(&[300, 301]), "tok");
        for (n, w) in weights {
            assert!(p.set_weight(n, *w), "{n}");
        }
        p
    }

    #[test]
    fn layout_without_truncation() {
        let s = state(&[10, 11], &[&[20, 21]]);
        assert_eq!(s.assembled, ids(&[10, 11, 4, 20, 21]));
        let s = state(&[10], &[&[20], &[30, 31]]);
        assert_eq!(s.assembled, ids(&[10, 4, 20, 5, 30, 31]));
    }

    #[test]
    fn truncation_takes_lowest_rank_tail() {
        let q: Vec<u32> = (0..10).collect();
        let c1: Vec<u32> = (100..200).collect();
        let c2: Vec<u32> = (200..300).collect();
        let c3: Vec<u32> = (300..400).collect();
        // 10 + 1 + 300 + 2 = 313 tokens; block 273 overflows by 40
        let s = RefactorState::from_tokens(ids(&q), vec![ids(&c1), ids(&c2), ids(&c3)], 273).unwrap();
        assert_eq!(s.assembled.len(), 273);
        assert_eq!(s.retrieved[2], ids(&c3[..60]));
        assert_eq!(s.retrieved[1], ids(&c2));
    }

    #[test]
    fn emptied_code_drops_with_separator() {
        let s = RefactorState::from_tokens(ids(&[1000]), vec![ids(&[7, 8]), ids(&[9, 9, 9])], 4).unwrap();
        assert_eq!(s.assembled, ids(&[1000, 4, 7, 8]));
        assert_eq!(s.retrieved.len(), 1);
    }

    #[test]
    fn oversized_query_is_error() {
        let err = RefactorState::from_tokens(ids(&[1; 512]), vec![ids(&[2])], 512).unwrap_err();
        assert!(matches!(err, RefactorError::OversizedQuery { needed: 513, block: 512 }));
    }

    #[test]
    fn uniform_policy_analytics() {
        // candidates: 10, 20, EOS, UNK
        let p = LinearPointerPolicy::new(3, 64, Vec::new(), "tok");
        let s = state(&[10], &[&[20]]);
        let seq = ids(&[20, 10, 20]);
        let (lp, per) = sequence_logprob(&p, &s, &seq).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert_eq!(per.len(), 3);
        let ex = SftExample {
            state: s,
            target: seq,
        };
        let (loss, _, _) = sft_loss_and_grad(&p, &[ex]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eos_forced_policy_emits_only_eos() {
        let p = policy(&[("is_eos", 1e3)]);
        let s = state(&[10], &[&[20, 21]]);
        let a = decode(&p, &s, 64, DecodeMode::Greedy, 0).unwrap();
        assert_eq!(a.tokens, vec![Specials::EOS]);
        assert!(a.logprob().abs() < 1e-12);
        assert!(a.body().is_empty());
    }

    #[test]
    fn copy_policy_reproduces_rank_one() {
        let p = policy(&[("aligned_rank_1", 20.0)]);
        let s = state(&[10], &[&[20, 21, 20, 22], &[30]]);
        let a = decode(&p, &s, 64, DecodeMode::Greedy, 0).unwrap();
        assert_eq!(a.tokens, ids(&[20, 21, 20, 22, 2]));
        // one-hot-ish: log-prob near zero
        assert!(a.logprob() > -1e-6);
    }

    #[test]
    fn budget_caps_length() {
        let p = policy(&[("is_eos", -50.0)]);
        let s = state(&[10], &[&[20, 21]]);
        for mode in [DecodeMode::Greedy, DecodeMode::Sample] {
            let a = decode(&p, &s, 5, mode, 3).unwrap();
            assert_eq!(a.tokens.len(), 5);
        }
        assert!(decode(&p, &s, 0, DecodeMode::Greedy, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_rescoring_matches() {
        let p = policy(&[("aligned_rank_1", 1.0), ("bigram_continuation", 0.7), ("is_eos", -0.3)]);
        let s = state(&[10, 11], &[&[20, 21, 22, 11], &[23, 20, 24]]);
        let a = decode(&p, &s, 30, DecodeMode::Sample, 9).unwrap();
        assert_eq!(a, decode(&p, &s, 30, DecodeMode::Sample, 9).unwrap());
        let (lp, per) = sequence_logprob(&p, &s, &a.tokens).unwrap();
        for (x, y) in per.iter().zip(&a.logprobs) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((lp - a.logprob()).abs() < 1e-9);
    }

    #[test]
    fn impossible_action_reported() {
        let p = policy(&[]);
        let s = state(&[10], &[&[20]]);
        let err = sequence_logprob(&p, &s, &ids(&[20, 999])).unwrap_err();
        assert!(matches!(err, RefactorError::ImpossibleAction { step: 1, .. }));
    }

    #[test]
    fn step_softmax_matches_hand_evaluation() {
        // candidates sorted: EOS(2), UNK(3), 10, 20, 300, 301
        let p = policy(&[("in_query", 0.5), ("in_rank_1", 1.0), ("is_eos", -1.0), ("global_only", 0.25)]);
        let s = state(&[10], &[&[20]]);
        let d = p.next_token_distribution(&s, &[]);
        assert_eq!(d.candidates, ids(&[2, 3, 10, 20, 300, 301]));
        let logits = [-1.0, 0.0, 0.5, 1.0, 0.25, 0.25];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for (lp, l) in d.log_probs.iter().zip(logits) {
            assert!((lp.exp() - l.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let mut p = policy(&[("aligned_rank_1", 0.3), ("log_freq", -0.2), ("eos_position", 0.4)]);
        let data = vec![
            SftExample {
                state: state(&[10, 11], &[&[20, 21, 22], &[21, 23]]),
                target: ids(&[20, 21, 23, 2]),
            },
            SftExample {
                state: state(&[12], &[&[24, 12, 25]]),
                target: ids(&[24, 25, 999, 2]),
            },
        ];
        let (_, grad, oov) = sft_loss_and_grad(&p, &data).unwrap();
        assert_eq!(oov, 1);
        let h = 1e-6;
        for i in 0..p.params().len() {
            let w = p.params()[i];
            p.params_mut()[i] = w + h;
            let up = sft_loss_and_grad(&p, &data).unwrap().0;
            p.params_mut()[i] = w - h;
            let down = sft_loss_and_grad(&p, &data).unwrap().0;
            p.params_mut()[i] = w;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / denom < 1e-5 || (fd - grad[i]).abs() < 1e-9, "feature {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn sft_rejects_bad_config() {
        let mut p = policy(&[]);
        let ex = SftExample {
            state: state(&[10], &[&[20]]),
            target: ids(&[20, 2]),
        };
        let cfg = SftConfig {
            lr: 0.0,
            ..SftConfig::default()
        };
        assert!(sft_train(&mut p, &[ex], &cfg).is_err());
        assert!(sft_train(&mut p, &[], &SftConfig::default()).is_err());
    }

    #[test]
    fn target_truncated_to_budget() {
        assert_eq!(sft_target(&ids(&[7, 8, 9]), 3), ids(&[7, 8, 2]));
        assert_eq!(sft_target(&[], 3), ids(&[2]));
    }

    #[test]
    fn policy_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = policy(&[("aligned_rank_1", 0.1 + 0.2), ("is_eos", -1.0 / 3.0)]);
        save_policy(&p, &path, None).unwrap();
        let q = load_policy(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
        let s = state(&[10], &[&[20, 21, 22]]);
        assert_eq!(
            decode(&p, &s, 20, DecodeMode::Sample, 5).unwrap(),
            decode(&q, &s, 20, DecodeMode::Sample, 5).unwrap()
        );

        let body = fs::read_to_string(&path).unwrap();
        fs::write(&path, &body[..body.len() / 2]).unwrap();
        assert!(matches!(load_policy(&path), Err(RefactorError::IncompatiblePolicy(_))));
        fs::write(&path, body.replace("\"version\": 1", "\"version\": 99")).unwrap();
        assert!(matches!(load_policy(&path), Err(RefactorError::IncompatiblePolicy(_))));
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(
            w in prop::collection::vec(-5.0f64..5.0, 15),
            q in prop::collection::vec(262u32..300, 1..6),
            c1 in prop::collection::vec(262u32..300, 1..20),
            c2 in prop::collection::vec(262u32..300, 0..20),
            prefix in prop::collection::vec(262u32..300, 0..10),
        ) {
            let mut p = LinearPointerPolicy::new(3, 64, ids(&[262, 263]), "t");
            p.params_mut().copy_from_slice(&w);
            let s = RefactorState::from_tokens(ids(&q), vec![ids(&c1), ids(&c2)], 512).unwrap();
            let d = p.next_token_distribution(&s, &ids(&prefix));
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(d.log_probs.iter().all(|l| l.is_finite()));
            prop_assert!(d.candidates.contains(&Specials::EOS));
        }

        #[test]
        fn truncation_never_touches_query(
            q in 1usize..40,
            lens in prop::collection::vec(0usize..80, 1..4),
            block in 41usize..200,
        ) {
            let query: Vec<TokenId> = (0..q as u32).map(|i| TokenId(1000 + i)).collect();
            let codes: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![TokenId(500); n]).collect();
            let s = RefactorState::from_tokens(query.clone(), codes, block).unwrap();
            prop_assert!(s.assembled.len() <= block);
            prop_assert_eq!(&s.assembled[..q], &query[..]);
            prop_assert_eq!(s.query, query);
        }
    }
}
