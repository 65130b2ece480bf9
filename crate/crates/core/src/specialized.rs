//! Personalized training against the group hierarchy.
//!
//! Each agent minimizes
//!
//! ```text
//! alpha * L(w | own data) + beta * sum_k (1 / N_k) * ||w - g_k||^2
//! ```
//!
//! where `g_k` is the GMP of its level-k ancestor and `N_k` that group's
//! member count, running from level 1 up to and including the root. Larger
//! groups pull more weakly. The solver is plain mini-batch gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DatasetShard, ModelParams, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShufflePolicy {
    /// Reshuffle every epoch from a stream keyed by (round seed, agent id).
    Seeded,
    /// Visit examples in stored order.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSolverConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_shuffle")]
    pub shuffle: ShufflePolicy,
}

fn default_shuffle() -> ShufflePolicy {
    ShufflePolicy::Seeded
}

impl Default for LocalSolverConfig {
    fn default() -> Self {
        LocalSolverConfig { epochs: 2, batch_size: 16, learning_rate: 0.1, shuffle: ShufflePolicy::Seeded }
    }
}

impl LocalSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("solver.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("solver.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("solver.learning_rate", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncestorLevel {
    pub gmp: ModelParams,
    pub member_count: usize,
}

/// Ancestor GMPs of one agent, level 1 first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AncestorContext {
    pub levels: Vec<AncestorLevel>,
}

impl AncestorContext {
    pub fn new(levels: impl IntoIterator<Item = (ModelParams, usize)>) -> Self {
        AncestorContext { levels: levels.into_iter().map(|(gmp, member_count)| AncestorLevel { gmp, member_count }).collect() }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for l in &self.levels {
            l.gmp.check_dim(dim)?;
            if l.member_count == 0 {
                return Err(Error::config("ancestor.member_count", "must be positive"));
            }
        }
        Ok(())
    }

    /// Minimizer of the proximal term alone: the `1/N`-weighted mean of the GMPs.
    pub fn proximal_center(&self) -> Option<ModelParams> {
        let first = self.levels.first()?;
        let mut num = ModelParams::zeros(first.gmp.dim());
        let mut den = 0.0;
        for l in &self.levels {
            let w = 1.0 / l.member_count as f64;
            num.axpy(w, &l.gmp);
            den += w;
        }
        num.iter_mut().for_each(|v| *v /= den);
        Some(num)
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        self.levels.iter().map(|l| crate::hierarchy::dist(w, &l.gmp).powi(2) / l.member_count as f64).sum()
    }

    /// Adds `scale * d/dw penalty` into `grad`.
    fn add_penalty_grad(&self, w: &[f64], scale: f64, grad: &mut [f64]) {
        for l in &self.levels {
            let c = 2.0 * scale / l.member_count as f64;
            for ((g, wi), gi) in grad.iter_mut().zip(w).zip(l.gmp.iter()) {
                *g += c * (wi - gi);
            }
        }
    }
}

/// Data term of the local objective, evaluated on subsets of examples.
pub trait DataLoss {
    fn num_examples(&self) -> usize;
    fn dim(&self) -> usize;
    /// Mean loss over `batch`, writing its gradient into `grad` when given.
    fn batch(&self, w: &[f64], batch: &[usize], grad: Option<&mut [f64]>) -> f64;
    /// Mean loss over all examples.
    fn full(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let all: Vec<usize> = (0..self.num_examples()).collect();
        self.batch(w, &all, grad)
    }
}

/// Cross-entropy of a classifier on one shard.
pub struct ShardLoss<'a> {
    pub spec: &'a ModelSpec,
    pub shard: &'a DatasetShard,
}

impl DataLoss for ShardLoss<'_> {
    fn num_examples(&self) -> usize {
        self.shard.len()
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn batch(&self, w: &[f64], batch: &[usize], grad: Option<&mut [f64]>) -> f64 {
        model::loss_and_grad(self.spec, w, batch.iter().map(|&i| &self.shard.examples[i]), grad)
    }

    fn full(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        model::loss_and_grad(self.spec, w, &self.shard.examples, grad)
    }
}

pub fn proximal_value(data: &impl DataLoss, w: &[f64], ctx: &AncestorContext, alpha: f64, beta: f64) -> f64 {
    let data_term = if alpha == 0.0 { 0.0 } else { alpha * data.full(w, None) };
    data_term + beta * ctx.penalty(w)
}

pub fn proximal_gradient(data: &impl DataLoss, w: &[f64], ctx: &AncestorContext, alpha: f64, beta: f64) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    data.full(w, Some(&mut g));
    g.iter_mut().for_each(|v| *v *= alpha);
    ctx.add_penalty_grad(w, beta, &mut g);
    g
}

fn check_inputs(spec: &ModelSpec, w: &ModelParams, shard: &DatasetShard, ctx: &AncestorContext) -> Result<()> {
    spec.validate()?;
    w.check_dim(spec.dim())?;
    for ex in &shard.examples {
        if ex.features.len() != spec.features {
            return Err(Error::DimensionMismatch { expected: spec.features, found: ex.features.len() });
        }
        if ex.label >= spec.classes {
            return Err(Error::config("label", format!("label {} outside [0, {})", ex.label, spec.classes)));
        }
    }
    ctx.check(spec.dim())
}

/// Value of the local proximal objective.
pub fn objective_value(
    spec: &ModelSpec,
    w: &ModelParams,
    shard: &DatasetShard,
    ctx: &AncestorContext,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_inputs(spec, w, shard, ctx)?;
    Ok(proximal_value(&ShardLoss { spec, shard }, w, ctx, alpha, beta))
}

/// Exact gradient of [`objective_value`].
pub fn objective_gradient(
    spec: &ModelSpec,
    w: &ModelParams,
    shard: &DatasetShard,
    ctx: &AncestorContext,
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_inputs(spec, w, shard, ctx)?;
    Ok(proximal_gradient(&ShardLoss { spec, shard }, w, ctx, alpha, beta))
}

/// Objective growth factor that aborts a local solve.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Mini-batch descent on an arbitrary data term. `agent` keys the shuffle
/// stream and labels divergence errors.
#[allow(clippy::too_many_arguments)]
pub fn solve<D: DataLoss>(
    data: &D,
    start: &ModelParams,
    ctx: &AncestorContext,
    alpha: f64,
    beta: f64,
    cfg: &LocalSolverConfig,
    agent: usize,
    round_seed: u64,
) -> Result<ModelParams> {
    let n = data.num_examples();
    let mut w = start.clone();
    let start_obj = proximal_value(data, &w, ctx, alpha, beta);
    let limit = DIVERGENCE_FACTOR * start_obj.abs().max(1e-8);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(&[round_seed, agent as u64]));
    let mut grad = vec![0.0; w.dim()];
    let batch = cfg.batch_size.min(n.max(1));
    for _ in 0..cfg.epochs {
        if cfg.shuffle == ShufflePolicy::Seeded {
            order.shuffle(&mut rng);
        }
        let batches: Vec<&[usize]> = if n == 0 { vec![&[]] } else { order.chunks(batch).collect() };
        for idx in batches {
            if alpha != 0.0 && !idx.is_empty() {
                data.batch(&w, idx, Some(&mut grad));
                grad.iter_mut().for_each(|g| *g *= alpha);
            } else {
                grad.fill(0.0);
            }
            ctx.add_penalty_grad(&w, beta, &mut grad);
            w.axpy(-cfg.learning_rate, &grad);
        }
        let obj = proximal_value(data, &w, ctx, alpha, beta);
        if !obj.is_finite() || obj > limit || !w.is_finite() {
            return Err(Error::Diverged { agent, learning_rate: cfg.learning_rate });
        }
    }
    Ok(w)
}

/// Runs `cfg.epochs` epochs of mini-batch descent on the local objective,
/// starting from `start`. Deterministic in its inputs.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    spec: &ModelSpec,
    start: &ModelParams,
    shard: &DatasetShard,
    ctx: &AncestorContext,
    alpha: f64,
    beta: f64,
    cfg: &LocalSolverConfig,
    round_seed: u64,
) -> Result<ModelParams> {
    check_inputs(spec, start, shard, ctx)?;
    cfg.validate()?;
    solve(&ShardLoss { spec, shard }, start, ctx, alpha, beta, cfg, shard.owner, round_seed)
}
