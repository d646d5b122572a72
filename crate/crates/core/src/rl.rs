//! Preference-aware tuning: reward, KL estimate, GAE and clipped PPO.
//!
//! One trajectory is one complete refactored sequence (a single action), so
//! with the default `γ = 1` and a terminal value of 0 the advantage reduces
//! to `reward - V(state)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{assemble_generator_input, GenerateError, GenerationRequest, Generator};
use crate::metrics::{codebleu, CodeBleuWeights};
use crate::parser::Parser;
use crate::refactor::{
    decode, sequence_logprob, ActionSequence, DecodeMode, Optimizer, OptimizerState, Policy, RefactorError,
    RefactorState, TrainablePolicy,
};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("ground-truth code is empty")]
    DegenerateTarget,
    #[error("GAE needs one more value than rewards, got {rewards} rewards and {values} values")]
    Shape { rewards: usize, values: usize },
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Refactor(#[from] RefactorError),
    #[error("{skipped} of {batch} rollouts failed at iteration {iteration}; last error: {last}")]
    Transport {
        iteration: usize,
        skipped: usize,
        batch: usize,
        last: String,
    },
}

/// `codebleu · √gt_len − β · max(kl, 0)`.
pub fn reward_from_parts(codebleu: f64, gt_len: usize, kl: f64, beta: f64) -> f64 {
    codebleu * (gt_len as f64).sqrt() - beta * kl.max(0.0)
}

/// Reward of a generator output against the ground truth. Length is counted
/// with the shared pipeline tokenizer.
pub fn compute_reward(
    gt: &str,
    output: &str,
    kl: f64,
    beta: f64,
    tokenizer: &Tokenizer,
    parser: Option<&dyn Parser>,
    weights: &CodeBleuWeights,
) -> Result<f64, RlError> {
    let len = tokenizer.tokenize(gt).len();
    if len == 0 || gt.trim().is_empty() {
        return Err(RlError::DegenerateTarget);
    }
    let cb = codebleu(output, gt, parser, weights).score;
    Ok(reward_from_parts(cb, len, kl, beta))
}

/// Sampled KL: summed per-token log-ratio of the action, floored at 0.
pub fn kl_estimate<P: Policy + ?Sized, Q: Policy + ?Sized>(
    policy: &P,
    reference: &Q,
    state: &RefactorState,
    action: &[TokenId],
) -> Result<f64, RlError> {
    let (lp, _) = sequence_logprob(policy, state, action)?;
    let (lr, _) = sequence_logprob(reference, state, action)?;
    Ok((lp - lr).max(0.0))
}

/// Generalized advantage estimates. `values` has the terminal value appended.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, RlError> {
    if values.len() != rewards.len() + 1 {
        return Err(RlError::Shape {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    /// Only the first `subset` training examples are used.
    pub subset: usize,
    /// Passes over the subset.
    pub epochs: usize,
    /// Gradient steps per rollout batch.
    pub ppo_epochs: usize,
    pub optimizer: Optimizer,
    /// Clip per-token ratios instead of the sequence ratio.
    pub per_token: bool,
    /// Standardize advantages within each batch.
    pub normalize_advantages: bool,
    /// Ridge term for the value baseline fit.
    pub ridge: f64,
    /// Fraction of failed rollouts in a batch that aborts training.
    pub max_skip_fraction: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            beta: 0.5,
            lr: 1e-5,
            batch: 16,
            subset: 5000,
            epochs: 1,
            ppo_epochs: 1,
            optimizer: Optimizer::Sgd,
            per_token: false,
            normalize_advantages: true,
            ridge: 1e-6,
            max_skip_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        Ok(())
    }
}

/// One rollout: a state, the sampled sequence and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub state: RefactorState,
    pub action: ActionSequence,
    pub logprob_old: f64,
    pub reward: f64,
    pub value: f64,
    pub advantage: Option<f64>,
}

/// Linear least-squares state value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueBaseline {
    pub weights: [f64; 4],
}

impl Default for ValueBaseline {
    fn default() -> Self {
        ValueBaseline { weights: [0.0; 4] }
    }
}

impl ValueBaseline {
    /// `[state length / 512, mean dense score, query length / 64, 1]`.
    pub fn features(state: &RefactorState) -> [f64; 4] {
        [
            state.assembled.len() as f64 / 512.0,
            state.mean_dense_score(),
            state.query.len() as f64 / 64.0,
            1.0,
        ]
    }

    /// Ridge-regularized least squares of `returns` on the state features.
    pub fn fit(states: &[&RefactorState], returns: &[f64], ridge: f64) -> Self {
        if states.is_empty() {
            return Self::default();
        }
        let x = DMatrix::from_fn(states.len(), 4, |i, j| Self::features(states[i])[j]);
        let y = DVector::from_column_slice(returns);
        let a = x.transpose() * &x + DMatrix::identity(4, 4) * ridge.max(1e-12);
        let b = x.transpose() * y;
        let w = a
            .clone()
            .cholesky()
            .map(|c| c.solve(&b))
            .or_else(|| a.lu().solve(&b))
            .unwrap_or_else(|| DVector::zeros(4));
        let mut weights = [0.0; 4];
        for (k, v) in w.iter().enumerate() {
            weights[k] = if v.is_finite() { *v } else { 0.0 };
        }
        ValueBaseline { weights }
    }

    pub fn predict(&self, state: &RefactorState) -> f64 {
        Self::features(state).iter().zip(&self.weights).map(|(a, b)| a * b).sum()
    }
}

/// Clipped surrogate loss over a batch and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub used: usize,
    pub dropped: usize,
}

fn clipped_term(r: f64, a: f64, eps: f64) -> (f64, f64) {
    let unclipped = r * a;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
    // d/dlogπ of the min: r·A while the unclipped branch is active
    if unclipped <= clipped {
        (unclipped, a * r)
    } else {
        (clipped, 0.0)
    }
}

/// `−mean min(r·Â, clip(r, 1−ε, 1+ε)·Â)` with `r = exp(logπ − logπ_old)`.
///
/// With `per_token`, each token contributes its own clipped term with the
/// sequence advantage; at the rollout parameters this has the same value
/// and gradient as the sequence-level objective.
pub fn ppo_loss<P: TrainablePolicy>(
    batch: &[Trajectory],
    policy: &P,
    eps: f64,
    per_token: bool,
) -> Result<PpoLoss, RlError> {
    let n = policy.params().len();
    let parts: Vec<Option<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|t| -> Result<Option<(f64, Vec<f64>)>, RlError> {
            let a = t.advantage.ok_or_else(|| RlError::Config("advantage not computed".into()))?;
            let steps = policy.token_logprob_grads(&t.state, &t.action.tokens)?;
            let mut grad = vec![0.0; n];
            if per_token {
                let mut obj = 0.0;
                for ((lp, g), old) in steps.iter().zip(&t.action.logprobs) {
                    let r = (lp - old).exp();
                    if !r.is_finite() {
                        return Ok(None);
                    }
                    let (o, coef) = clipped_term(r, a, eps);
                    obj += o;
                    grad.iter_mut().zip(g).for_each(|(x, y)| *x += coef * y);
                }
                Ok(Some((obj, grad)))
            } else {
                let lp: f64 = steps.iter().map(|s| s.0).sum();
                let r = (lp - t.logprob_old).exp();
                if !r.is_finite() {
                    return Ok(None);
                }
                let (o, coef) = clipped_term(r, a, eps);
                for (_, g) in &steps {
                    grad.iter_mut().zip(g).for_each(|(x, y)| *x += coef * y);
                }
                Ok(Some((o, grad)))
            }
        })
        .collect::<Result<_, _>>()?;
    let mut out = PpoLoss {
        loss: 0.0,
        grad: vec![0.0; n],
        used: 0,
        dropped: 0,
    };
    let used = parts.iter().filter(|p| p.is_some()).count();
    for p in parts {
        match p {
            None => out.dropped += 1,
            Some((o, g)) => {
                out.loss -= o / used as f64;
                out.grad.iter_mut().zip(&g).for_each(|(x, y)| *x -= y / used as f64);
            }
        }
    }
    if out.dropped > 0 {
        log::warn!("dropped {} trajectories with non-finite ratios", out.dropped);
    }
    out.used = used;
    Ok(out)
}

/// A training query with its frozen retrieval state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoExample {
    pub id: String,
    pub query: String,
    pub state: RefactorState,
    pub reference: String,
}

/// How a refactored sequence becomes a scored generation.
pub struct RewardEnv<'a> {
    pub tokenizer: &'a Tokenizer,
    pub generator: &'a dyn Generator,
    pub parser: Option<&'a dyn Parser>,
    pub weights: CodeBleuWeights,
    /// Refactorer output budget.
    pub budget: usize,
    /// Generator window `W`.
    pub window: usize,
    pub block_size: usize,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
}

impl RewardEnv<'_> {
    /// Feed `body` (refactored tokens) to the generator.
    pub fn generate(&self, state: &RefactorState, body: &[TokenId]) -> Result<String, GenerateError> {
        let ctx = assemble_generator_input(&state.query, body, self.window, self.block_size)?;
        let req = GenerationRequest::new(ctx, self.tokenizer, self.max_new_tokens, self.stop.clone(), self.temperature)?;
        self.generator.generate(&req)
    }
}

/// Scored rollout of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub action: ActionSequence,
    pub output: String,
    pub codebleu: f64,
    pub kl: f64,
    pub reward: f64,
}

/// Decode, generate and score one example.
pub fn rollout<P: Policy + ?Sized, Q: Policy + ?Sized>(
    policy: &P,
    reference: &Q,
    env: &RewardEnv,
    ex: &PpoExample,
    beta: f64,
    mode: DecodeMode,
    seed: u64,
) -> Result<Result<Rollout, GenerateError>, RlError> {
    let action = decode(policy, &ex.state, env.budget, mode, seed)?;
    let output = match env.generate(&ex.state, action.body()) {
        Ok(o) => o,
        Err(e) => return Ok(Err(e)),
    };
    let kl = kl_estimate(policy, reference, &ex.state, &action.tokens)?;
    let gt_len = env.tokenizer.tokenize(&ex.reference).len();
    if gt_len == 0 {
        return Err(RlError::DegenerateTarget);
    }
    let cb = codebleu(&output, &ex.reference, env.parser, &env.weights).score;
    Ok(Ok(Rollout {
        reward: reward_from_parts(cb, gt_len, kl, beta),
        action,
        output,
        codebleu: cb,
        kl,
    }))
}

/// Per-rollout seed from the run seed, a stream tag and an index.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub mean_reward: f64,
    pub mean_codebleu: f64,
    pub mean_kl: f64,
    pub n: usize,
}

/// Mean reward of `policy` over `data`; `samples` rollouts per example.
pub fn evaluate_reward<P: Policy + ?Sized, Q: Policy + ?Sized>(
    policy: &P,
    reference: &Q,
    env: &RewardEnv,
    data: &[PpoExample],
    beta: f64,
    mode: DecodeMode,
    samples: usize,
    seed: u64,
) -> Result<RewardSummary, RlError> {
    let jobs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..samples.max(1)).map(move |s| (i, s))).collect();
    let results: Vec<Rollout> = jobs
        .par_iter()
        .map(|&(i, s)| {
            rollout(policy, reference, env, &data[i], beta, mode, mix_seed(seed, s as u64, i as u64))?.map_err(|e| {
                RlError::Transport {
                    iteration: 0,
                    skipped: 1,
                    batch: 1,
                    last: e.to_string(),
                }
            })
        })
        .collect::<Result<_, _>>()?;
    let n = results.len().max(1) as f64;
    Ok(RewardSummary {
        mean_reward: results.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_codebleu: results.iter().map(|r| r.codebleu).sum::<f64>() / n,
        mean_kl: results.iter().map(|r| r.kl).sum::<f64>() / n,
        n: results.len(),
    })
}

/// One line of the training stats file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub loss: f64,
    pub value_mse: f64,
    pub skipped: usize,
}

/// PPO against the frozen `reference` (the post-SFT policy). `on_iteration`
/// sees the stats and parameters after every update.
pub fn ppo_train<P: TrainablePolicy>(
    policy: &mut P,
    reference: &P,
    env: &RewardEnv,
    data: &[PpoExample],
    cfg: &PpoConfig,
    mut on_iteration: impl FnMut(&IterationStats, &P),
) -> Result<Vec<IterationStats>, RlError> {
    cfg.validate()?;
    let data = &data[..data.len().min(cfg.subset)];
    if data.is_empty() {
        return Err(RlError::Config("no PPO training examples".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, policy.params().len());
    let mut stats = Vec::new();
    let mut iteration = 0;
    for _epoch in 0..cfg.epochs {
        for (b, chunk) in data.chunks(cfg.batch).enumerate() {
            iteration += 1;
            let base = (b * cfg.batch) as u64;
            let current: &P = policy;
            let results: Vec<Result<Rollout, GenerateError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, ex)| {
                    rollout(
                        current,
                        reference,
                        env,
                        ex,
                        cfg.beta,
                        DecodeMode::Sample,
                        mix_seed(cfg.seed, iteration as u64, base + i as u64),
                    )
                })
                .collect::<Result<_, _>>()?;
            let skipped = results.iter().filter(|r| r.is_err()).count();
            if skipped as f64 > cfg.max_skip_fraction * chunk.len() as f64 {
                let last = results.iter().rev().find_map(|r| r.as_ref().err()).map(|e| e.to_string());
                return Err(RlError::Transport {
                    iteration,
                    skipped,
                    batch: chunk.len(),
                    last: last.unwrap_or_default(),
                });
            }
            let mut trajs: Vec<Trajectory> = chunk
                .iter()
                .zip(results)
                .filter_map(|(ex, r)| {
                    r.ok().map(|r| Trajectory {
                        state: ex.state.clone(),
                        logprob_old: r.action.logprob(),
                        action: r.action,
                        reward: r.reward,
                        value: 0.0,
                        advantage: None,
                    })
                })
                .collect();
            let kls: Vec<f64> = trajs
                .iter()
                .map(|t| kl_estimate(current, reference, &t.state, &t.action.tokens))
                .collect::<Result<_, _>>()?;
            let states: Vec<&RefactorState> = trajs.iter().map(|t| &t.state).collect();
            let returns: Vec<f64> = trajs.iter().map(|t| t.reward).collect();
            let baseline = ValueBaseline::fit(&states, &returns, cfg.ridge);
            let mut value_mse = 0.0;
            for t in &mut trajs {
                t.value = baseline.predict(&t.state);
                t.advantage = Some(gae(&[t.reward], &[t.value, 0.0], cfg.gamma, cfg.lambda)?[0]);
                value_mse += (t.reward - t.value).powi(2);
            }
            let n = trajs.len().max(1) as f64;
            if cfg.normalize_advantages && trajs.len() > 1 {
                let mean = trajs.iter().map(|t| t.advantage.unwrap()).sum::<f64>() / n;
                let var = trajs.iter().map(|t| (t.advantage.unwrap() - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt().max(1e-8);
                for t in &mut trajs {
                    t.advantage = t.advantage.map(|a| (a - mean) / sd);
                }
            }
            let mut loss = f64::NAN;
            for k in 0..cfg.ppo_epochs.max(1) {
                let l = ppo_loss(&trajs, policy, cfg.clip_eps, cfg.per_token)?;
                if k == 0 {
                    loss = l.loss;
                }
                opt.step(policy.params_mut(), &l.grad, cfg.lr);
            }
            let s = IterationStats {
                iteration,
                mean_reward: returns.iter().sum::<f64>() / n,
                mean_kl: kls.iter().sum::<f64>() / n,
                loss,
                value_mse: value_mse / n,
                skipped,
            };
            log::info!(
                "ppo iteration {iteration}: reward {:.4} kl {:.4} loss {:.4}",
                s.mean_reward,
                s.mean_kl,
                s.loss
            );
            on_iteration(&s, policy);
            stats.push(s);
        }
    }
    Ok(stats)
}
