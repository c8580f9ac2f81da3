//! Clipped group-relative surrogate loss over token-level advantages.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-token surrogate terms are averaged into the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Flat mean over every token in the batch.
    #[default]
    FlatToken,
    /// Mean over rollouts of each rollout's token mean.
    RolloutMean,
}

impl fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossWeighting::FlatToken => "flat_token",
            LossWeighting::RolloutMean => "rollout_mean",
        })
    }
}

impl FromStr for LossWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "flat_token" => Ok(LossWeighting::FlatToken),
            "rollout_mean" => Ok(LossWeighting::RolloutMean),
            other => Err(Error::Config(format!("unknown loss weighting `{other}`"))),
        }
    }
}

/// Token-aligned log-probabilities and advantages for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub adv: Vec<f64>,
    /// Rollout index of each token.
    pub rollout: Vec<usize>,
    pub weighting: LossWeighting,
}

impl TokenBatch {
    pub fn new(logp_new: Vec<f64>, logp_old: Vec<f64>, adv: Vec<f64>, rollout: Vec<usize>) -> Result<Self> {
        let n = logp_new.len();
        if logp_old.len() != n || adv.len() != n || rollout.len() != n {
            return Err(Error::Arity(format!(
                "token batch arrays differ in length: {n}, {}, {}, {}",
                logp_old.len(),
                adv.len(),
                rollout.len()
            )));
        }
        if logp_new.iter().chain(&logp_old).chain(&adv).any(|v| !v.is_finite()) {
            return Err(Error::Arity("non-finite value in token batch".into()));
        }
        Ok(TokenBatch {
            logp_new,
            logp_old,
            adv,
            rollout,
            weighting: LossWeighting::FlatToken,
        })
    }

    /// Single-rollout batch, handy for tests.
    pub fn single(logp_new: Vec<f64>, logp_old: Vec<f64>, adv: Vec<f64>) -> Result<Self> {
        let n = logp_new.len();
        Self::new(logp_new, logp_old, adv, vec![0; n])
    }

    pub fn with_weighting(mut self, weighting: LossWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn len(&self) -> usize {
        self.adv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adv.is_empty()
    }

    pub fn ratio(&self, t: usize) -> f64 {
        (self.logp_new[t] - self.logp_old[t]).exp()
    }

    /// Averaging weight of each token; the weights sum to 1.
    pub fn token_weights(&self) -> Vec<f64> {
        let n = self.len();
        match self.weighting {
            LossWeighting::FlatToken => vec![1.0 / n as f64; n],
            LossWeighting::RolloutMean => {
                let mut counts = std::collections::BTreeMap::<usize, usize>::new();
                for &r in &self.rollout {
                    *counts.entry(r).or_default() += 1;
                }
                let n_rollouts = counts.len() as f64;
                self.rollout
                    .iter()
                    .map(|r| 1.0 / (n_rollouts * counts[r] as f64))
                    .collect()
            }
        }
    }
}

/// `min(rho * A, clip(rho) * A)` for one token.
pub fn surrogate_term(ratio: f64, adv: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * adv).min(clipped * adv)
}

/// Negative weighted mean of the per-token clipped surrogate, summed in token
/// order.
pub fn grpo_loss(batch: &TokenBatch, eps_clip: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let w = batch.token_weights();
    let mut total = 0.0;
    for t in 0..batch.len() {
        total += w[t] * surrogate_term(batch.ratio(t), batch.adv[t], eps_clip);
    }
    -total
}

/// Gradient of [`grpo_loss`] with respect to each `logp_new`.
///
/// Only tokens whose unclipped term attains the minimum carry gradient; ties
/// go to the unclipped branch.
pub fn grpo_grad(batch: &TokenBatch, eps_clip: f64) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    let w = batch.token_weights();
    (0..batch.len())
        .map(|t| {
            let rho = batch.ratio(t);
            let a = batch.adv[t];
            let clipped = rho.clamp(1.0 - eps_clip, 1.0 + eps_clip);
            if rho * a <= clipped * a {
                -w[t] * rho * a
            } else {
                0.0
            }
        })
        .collect()
}
