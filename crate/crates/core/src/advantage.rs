//! Unified outcome/process advantage.
//!
//! The outcome advantage is the usual group z-score of the outcome reward.
//! Step rewards are normalized with statistics pooled over the steps of the
//! group's correct rollouts, then turned into a token-level process advantage
//! by suffix sums: a token inside step `k` is credited with the normalized
//! rewards of step `k` and every later step. The process term only reaches
//! correct rollouts.

use crate::config::{ShapingMode, SwapConfig};
use crate::error::{Error, Result};
use crate::trace::check_step_ends;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub mu_out: f64,
    pub sigma_out: f64,
    /// `None` when the group has no correct rollout.
    pub mu_step: Option<f64>,
    pub sigma_step: Option<f64>,
    pub n_correct: usize,
}

/// Piecewise-constant function over 1-based token positions `1..=n`.
///
/// Each `(end, value)` piece covers `(previous end, end]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Piecewise {
    pieces: Vec<(usize, f64)>,
}

impl Piecewise {
    /// Pieces must have strictly increasing ends starting above 0.
    pub fn from_pieces(pieces: Vec<(usize, f64)>) -> Result<Self> {
        let ends: Vec<usize> = pieces.iter().map(|p| p.0).collect();
        check_step_ends(&ends, usize::MAX).map_err(Error::Arity)?;
        Ok(Piecewise { pieces })
    }

    pub fn pieces(&self) -> &[(usize, f64)] {
        &self.pieces
    }

    /// Number of tokens covered.
    pub fn n_tokens(&self) -> usize {
        self.pieces.last().map_or(0, |p| p.0)
    }

    /// Value at 1-based token `t`, or `None` past the end.
    pub fn value_at(&self, t: usize) -> Option<f64> {
        if t == 0 {
            return None;
        }
        let i = self.pieces.partition_point(|p| p.0 < t);
        self.pieces.get(i).map(|p| p.1)
    }

    /// One value per token.
    pub fn expand(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_tokens());
        let mut prev = 0;
        for &(end, v) in &self.pieces {
            out.extend(std::iter::repeat_n(v, end - prev));
            prev = end;
        }
        out
    }

    /// Merges neighbouring pieces with bit-identical values.
    pub fn coalesced(&self) -> Piecewise {
        let mut pieces: Vec<(usize, f64)> = Vec::with_capacity(self.pieces.len());
        for &(end, v) in &self.pieces {
            match pieces.last_mut() {
                Some(last) if last.1.to_bits() == v.to_bits() => last.0 = end,
                _ => pieces.push((end, v)),
            }
        }
        Piecewise { pieces }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Piecewise {
        Piecewise {
            pieces: self.pieces.iter().map(|&(e, v)| (e, f(v))).collect(),
        }
    }
}

/// Per-rollout advantage results.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageMap {
    pub outcome_adv: f64,
    pub normalized_step_rewards: Vec<f64>,
    pub process_adv: Piecewise,
    pub unified_adv: Piecewise,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    match xs.first() {
        None => return (0.0, 0.0),
        // exact for constant inputs, where summation would leave residue
        Some(&x0) if xs.iter().all(|&x| x == x0) => return (x0, 0.0),
        _ => {}
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r - mean) / (std + eps)` with the population standard deviation.
pub fn outcome_advantage(rewards: &[f64], eps_norm: f64) -> Vec<f64> {
    let (mean, std) = mean_std(rewards);
    rewards.iter().map(|r| (r - mean) / (std + eps_norm)).collect()
}

/// Normalizes every rollout's step rewards with the mean and population std
/// of the pooled steps of correct rollouts.
///
/// With no correct rollout, or fewer than two pooled steps, every normalized
/// reward is zero. Returns the normalized rewards and the pooled `(mu, sigma)`
/// when at least one rollout is correct.
pub fn normalize_step_rewards(
    step_rewards: &[Vec<f64>],
    correct: &[bool],
    eps_norm: f64,
) -> Result<(Vec<Vec<f64>>, Option<(f64, f64)>)> {
    if step_rewards.len() != correct.len() {
        return Err(Error::Arity(format!(
            "{} step reward rows but {} correctness flags",
            step_rewards.len(),
            correct.len()
        )));
    }
    let pooled: Vec<f64> = step_rewards
        .iter()
        .zip(correct)
        .filter(|(_, &ok)| ok)
        .flat_map(|(r, _)| r.iter().copied())
        .collect();
    let any_correct = correct.iter().any(|&c| c);
    let stats = any_correct.then(|| mean_std(&pooled));
    let normalized = match stats {
        Some((mu, sigma)) if pooled.len() >= 2 => step_rewards
            .iter()
            .map(|row| row.iter().map(|r| (r - mu) / (sigma + eps_norm)).collect())
            .collect(),
        _ => step_rewards.iter().map(|row| vec![0.0; row.len()]).collect(),
    };
    Ok((normalized, stats))
}

/// Suffix sums of the normalized step rewards laid out over tokens. Tokens
/// after the last step end get 0.
pub fn process_advantage(normalized: &[f64], step_ends: &[usize], n_tokens: usize) -> Result<Piecewise> {
    if normalized.len() != step_ends.len() {
        return Err(Error::Arity(format!(
            "{} step rewards but {} step ends",
            normalized.len(),
            step_ends.len()
        )));
    }
    check_step_ends(step_ends, n_tokens).map_err(Error::Arity)?;
    let mut suffix = vec![0.0; normalized.len()];
    let mut acc = 0.0;
    for k in (0..normalized.len()).rev() {
        acc += normalized[k];
        suffix[k] = acc;
    }
    let mut pieces: Vec<(usize, f64)> = step_ends.iter().copied().zip(suffix).collect();
    if step_ends.last().copied().unwrap_or(0) < n_tokens {
        pieces.push((n_tokens, 0.0));
    }
    Ok(Piecewise { pieces })
}

/// Effective `(beta, theta)` after the ablation mode is applied.
pub fn mode_weights(cfg: &SwapConfig) -> (f64, f64) {
    match cfg.shaping_mode {
        ShapingMode::OutcomeOnly => (cfg.beta, 0.0),
        ShapingMode::StepOnly => (0.0, cfg.theta),
        _ => (cfg.beta, cfg.theta),
    }
}

/// `beta * A_out + theta * [reward > 0] * A_proc(t)`.
pub fn unified_advantage(outcome_adv: f64, process: &Piecewise, beta: f64, theta: f64, outcome_reward: f64) -> Piecewise {
    let base = beta * outcome_adv;
    if outcome_reward > 0.0 && theta != 0.0 {
        process.map(|p| base + theta * p)
    } else {
        process.map(|_| base)
    }
}

/// Per-rollout input to [`group_advantages`].
#[derive(Debug, Clone, Copy)]
pub struct RolloutSteps<'a> {
    pub outcome_reward: f64,
    pub step_rewards: &'a [f64],
    pub step_ends: &'a [usize],
    pub n_tokens: usize,
}

/// Builds group statistics and every rollout's advantage map.
pub fn group_advantages(rollouts: &[RolloutSteps<'_>], cfg: &SwapConfig) -> Result<(GroupStats, Vec<AdvantageMap>)> {
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.outcome_reward).collect();
    let correct: Vec<bool> = rewards.iter().map(|&r| r > 0.0).collect();
    let (mu_out, sigma_out) = mean_std(&rewards);
    let outcome = outcome_advantage(&rewards, cfg.eps_norm);
    let rows: Vec<Vec<f64>> = rollouts.iter().map(|r| r.step_rewards.to_vec()).collect();
    let (normalized, step_stats) = normalize_step_rewards(&rows, &correct, cfg.eps_norm)?;
    let (beta, theta) = mode_weights(cfg);
    let maps = rollouts
        .iter()
        .zip(outcome)
        .zip(normalized)
        .map(|((r, a_out), norm)| {
            let process = process_advantage(&norm, r.step_ends, r.n_tokens)?;
            let unified = unified_advantage(a_out, &process, beta, theta, r.outcome_reward);
            Ok(AdvantageMap {
                outcome_adv: a_out,
                normalized_step_rewards: norm,
                process_adv: process,
                unified_adv: unified,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = GroupStats {
        mu_out,
        sigma_out,
        mu_step: step_stats.map(|s| s.0),
        sigma_step: step_stats.map(|s| s.1),
        n_correct: correct.iter().filter(|&&c| c).count(),
    };
    Ok((stats, maps))
}
