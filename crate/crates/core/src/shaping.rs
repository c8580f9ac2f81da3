//! Difficulty-aware length penalty and its redistribution over steps.
//!
//! A rollout longer than its group's target length carries a penalty mass
//! `P = lambda * (L - L_target) / L_target`. The mass is split across steps by
//! a softmax over negated local gains, so steps that moved the answer score
//! the least absorb the most penalty. The step reward is the monotone gain
//! minus the step's share.

use crate::config::{ShapingMode, SwapConfig};
use crate::error::{Error, Result};
use crate::gain::ScoreTrace;
use crate::trace::RolloutGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRewards {
    pub target_length: Option<usize>,
    /// Penalty mass actually applied under the active mode.
    pub penalty_mass: f64,
    pub weights: Vec<f64>,
    pub step_rewards: Vec<f64>,
}

/// Lower median of the reasoning lengths of correct rollouts, or `None` when
/// the group has no correct rollout.
pub fn target_length(group: &RolloutGroup) -> Option<usize> {
    let mut lengths: Vec<usize> = group
        .rollouts
        .iter()
        .filter(|r| r.answer_correct)
        .map(|r| r.reasoning_length)
        .collect();
    if lengths.is_empty() {
        return None;
    }
    lengths.sort_unstable();
    Some(lengths[(lengths.len() - 1) / 2])
}

pub fn penalty_mass(length: usize, target: Option<usize>, lambda: f64) -> Result<f64> {
    match target {
        None => Ok(0.0),
        Some(t) if length <= t => Ok(0.0),
        Some(0) => Err(Error::DegenerateTarget { length }),
        Some(t) => Ok(lambda * (length - t) as f64 / t as f64),
    }
}

/// Softmax of `-g / tau`, computed with max-subtraction. Empty in, empty out.
pub fn penalty_weights(local_gain: &[f64], tau: f64) -> Vec<f64> {
    if local_gain.is_empty() {
        return Vec::new();
    }
    let logits: Vec<f64> = local_gain.iter().map(|g| -g / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Combines monotone gains with the penalty according to `mode`.
///
/// `StepOnly` shapes like `Swap`; the outcome term is dropped later when the
/// advantage is built.
pub fn step_rewards(
    delta: &[f64],
    penalty: f64,
    weights: &[f64],
    mode: ShapingMode,
    static_penalty: f64,
) -> Result<Vec<f64>> {
    if delta.len() != weights.len() {
        return Err(Error::Arity(format!(
            "{} gains but {} penalty weights",
            delta.len(),
            weights.len()
        )));
    }
    let k = delta.len() as f64;
    let out = match mode {
        ShapingMode::Swap | ShapingMode::StepOnly => {
            delta.iter().zip(weights).map(|(d, w)| d - penalty * w).collect()
        }
        ShapingMode::NoPenalty => delta.to_vec(),
        ShapingMode::UniformPenalty => delta.iter().map(|d| d - penalty / k).collect(),
        ShapingMode::StaticPenalty => delta.iter().map(|d| d - static_penalty).collect(),
        ShapingMode::OutcomeOnly => vec![0.0; delta.len()],
    };
    Ok(out)
}

/// Step rewards for one rollout of length `length` given its group's target.
pub fn shape(trace: &ScoreTrace, length: usize, target: Option<usize>, cfg: &SwapConfig) -> Result<ShapedRewards> {
    let mode = cfg.shaping_mode;
    let uses_mass = matches!(
        mode,
        ShapingMode::Swap | ShapingMode::StepOnly | ShapingMode::UniformPenalty
    );
    let penalty = if uses_mass {
        penalty_mass(length, target, cfg.lambda)?
    } else {
        0.0
    };
    let weights = penalty_weights(&trace.local_gain, cfg.tau);
    let step_rewards = step_rewards(&trace.delta, penalty, &weights, mode, cfg.static_penalty)?;
    Ok(ShapedRewards {
        target_length: target,
        penalty_mass: penalty,
        weights,
        step_rewards,
    })
}
