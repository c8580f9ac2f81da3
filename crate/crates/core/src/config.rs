//! Shaping configuration and the flat `key = value` config format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossWeighting;

/// Which parts of the reward pipeline are active. `Swap` is the full method,
/// the rest are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingMode {
    Swap,
    OutcomeOnly,
    StepOnly,
    NoPenalty,
    StaticPenalty,
    UniformPenalty,
}

impl ShapingMode {
    pub const ALL: [ShapingMode; 6] = [
        ShapingMode::Swap,
        ShapingMode::OutcomeOnly,
        ShapingMode::StepOnly,
        ShapingMode::NoPenalty,
        ShapingMode::StaticPenalty,
        ShapingMode::UniformPenalty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapingMode::Swap => "swap",
            ShapingMode::OutcomeOnly => "outcome_only",
            ShapingMode::StepOnly => "step_only",
            ShapingMode::NoPenalty => "no_penalty",
            ShapingMode::StaticPenalty => "static_penalty",
            ShapingMode::UniformPenalty => "uniform_penalty",
        }
    }
}

impl fmt::Display for ShapingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ShapingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown shaping mode `{s}`")))
    }
}

/// Parameters of the shaping and advantage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapConfig {
    /// Token budget per step (`M`).
    pub step_budget: usize,
    /// Maximum number of steps per rollout (`K`).
    pub max_steps: usize,
    /// Length penalty coefficient.
    pub lambda: f64,
    /// Softmax temperature of the penalty weights.
    pub tau: f64,
    /// Weight of the outcome advantage.
    pub beta: f64,
    /// Weight of the process advantage.
    pub theta: f64,
    pub eps_norm: f64,
    pub eps_clip: f64,
    pub shaping_mode: ShapingMode,
    pub group_size: usize,
    /// Per-step constant subtracted under [`ShapingMode::StaticPenalty`].
    pub static_penalty: f64,
    pub loss_weighting: LossWeighting,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            step_budget: 350,
            max_steps: 25,
            lambda: 1.0,
            tau: 1.0,
            beta: 1.0,
            theta: 0.3,
            eps_norm: 1e-8,
            eps_clip: 0.2,
            shaping_mode: ShapingMode::Swap,
            group_size: 16,
            static_penalty: 0.05,
            loss_weighting: LossWeighting::FlatToken,
        }
    }
}

impl SwapConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.step_budget == 0 {
            return fail("step_budget must be >= 1");
        }
        if self.max_steps == 0 {
            return fail("max_steps must be >= 1");
        }
        if self.group_size == 0 {
            return fail("group_size must be >= 1");
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) || !(self.theta >= 0.0) {
            return fail("lambda, beta and theta must be >= 0");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail("tau must be a positive finite number");
        }
        if !(self.eps_norm > 0.0) {
            return fail("eps_norm must be > 0");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return fail("eps_clip must lie in (0, 1)");
        }
        if !self.static_penalty.is_finite() {
            return fail("static_penalty must be finite");
        }
        Ok(())
    }

    /// Sets one field by its config-file name. Returns `Ok(false)` if the key
    /// does not belong to this struct.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "step_budget" | "M" => self.step_budget = parse_value(key, value)?,
            "max_steps" | "K" => self.max_steps = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "theta" => self.theta = parse_value(key, value)?,
            "eps_norm" => self.eps_norm = parse_value(key, value)?,
            "eps_clip" => self.eps_clip = parse_value(key, value)?,
            "shaping_mode" | "mode" => self.shaping_mode = value.parse()?,
            "group_size" | "N" => self.group_size = parse_value(key, value)?,
            "static_penalty" => self.static_penalty = parse_value(key, value)?,
            "loss_weighting" => self.loss_weighting = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Splits a flat config text into `(line, key, value)` entries.
///
/// One `key = value` per line; `#` starts a comment; blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
