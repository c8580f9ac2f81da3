//! Rollout and group data model plus the newline-delimited JSON rollout log.
//!
//! One record per line:
//!
//! ```text
//! {"prompt_id":"p1","rollout_id":"r0","tokens":["a","b\n"],"answer_correct":true,
//!  "reasoning_length":2,"step_ends":[2],"ell":[-1.5,-0.5]}
//! ```
//!
//! Exactly one of `tokens` / `text` must be present (`text` goes through the
//! whitespace tokenizer). `step_ends` and `ell` are optional precomputed
//! segmentation and prefix scores; `ell` requires `step_ends`.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::whitespace_tokenize;

/// Outcome reward given to a correct answer.
pub const CORRECT_REWARD: f64 = 1.0;

/// One token surface. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(surface: impl Into<String>) -> Option<Self> {
        let s = surface.into();
        (!s.is_empty()).then_some(Token(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn has_line_break(&self) -> bool {
        self.0.contains('\n')
    }
}

impl TryFrom<String> for Token {
    type Error = &'static str;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        Token::new(s).ok_or("empty token surface")
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_id: String,
    pub rollout_id: String,
    /// Reasoning tokens (content before the end-of-thinking marker). `None`
    /// only for records read in tokenless mode.
    pub reasoning_tokens: Option<Vec<Token>>,
    pub answer_correct: bool,
    pub outcome_reward: f64,
    pub reasoning_length: usize,
    /// Precomputed exclusive step end indices.
    pub step_ends: Option<Vec<usize>>,
    /// Precomputed prefix scores, one more than the number of steps.
    pub prefix_scores: Option<Vec<f64>>,
}

impl Rollout {
    /// Builds a rollout from tokens; the outcome reward follows correctness.
    pub fn from_tokens(
        prompt_id: impl Into<String>,
        rollout_id: impl Into<String>,
        tokens: Vec<Token>,
        answer_correct: bool,
    ) -> Self {
        Rollout {
            prompt_id: prompt_id.into(),
            rollout_id: rollout_id.into(),
            reasoning_length: tokens.len(),
            reasoning_tokens: Some(tokens),
            answer_correct,
            outcome_reward: outcome_reward_for(answer_correct),
            step_ends: None,
            prefix_scores: None,
        }
    }

    pub fn with_precomputed(mut self, step_ends: Vec<usize>, prefix_scores: Vec<f64>) -> Self {
        self.step_ends = Some(step_ends);
        self.prefix_scores = Some(prefix_scores);
        self
    }

    pub fn tokens(&self) -> &[Token] {
        self.reasoning_tokens.as_deref().unwrap_or(&[])
    }

    pub fn is_correct(&self) -> bool {
        self.outcome_reward > 0.0
    }
}

pub fn outcome_reward_for(answer_correct: bool) -> f64 {
    if answer_correct {
        CORRECT_REWARD
    } else {
        0.0
    }
}

/// All rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }
}

/// Wire form of one log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: String,
    pub rollout_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub answer_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ends: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<Vec<f64>>,
}

impl From<&Rollout> for RolloutRecord {
    fn from(r: &Rollout) -> Self {
        RolloutRecord {
            prompt_id: r.prompt_id.clone(),
            rollout_id: r.rollout_id.clone(),
            tokens: r
                .reasoning_tokens
                .as_ref()
                .map(|ts| ts.iter().map(|t| t.as_str().to_string()).collect()),
            text: None,
            answer_correct: r.answer_correct,
            reasoning_length: Some(r.reasoning_length),
            step_ends: r.step_ends.clone(),
            ell: r.prefix_scores.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Accept records with neither `tokens` nor `text` (they must then carry
    /// `reasoning_length`). Used by the gain analysis.
    pub allow_tokenless: bool,
}

impl RolloutRecord {
    /// Converts a wire record, enforcing every rollout invariant.
    pub fn into_rollout(self, line: usize, opts: ParseOptions) -> Result<Rollout> {
        let schema = |message: String| Error::Schema { line, message };
        let tokens = match (self.tokens, self.text) {
            (Some(_), Some(_)) => return Err(schema("both `tokens` and `text` present".into())),
            (Some(ts), None) => {
                let mut out = Vec::with_capacity(ts.len());
                for (i, s) in ts.into_iter().enumerate() {
                    out.push(Token::new(s).ok_or_else(|| schema(format!("token {i} is empty")))?);
                }
                Some(out)
            }
            (None, Some(text)) => Some(whitespace_tokenize(&text)),
            (None, None) if opts.allow_tokenless => None,
            (None, None) => return Err(schema("one of `tokens` or `text` is required".into())),
        };
        let reasoning_length = match (&tokens, self.reasoning_length) {
            (Some(ts), Some(l)) if l != ts.len() => {
                return Err(schema(format!(
                    "reasoning_length {l} does not match {} tokens",
                    ts.len()
                )))
            }
            (Some(ts), _) => ts.len(),
            (None, Some(l)) => l,
            (None, None) => return Err(schema("tokenless record needs `reasoning_length`".into())),
        };
        if let Some(ends) = &self.step_ends {
            check_step_ends(ends, reasoning_length).map_err(schema)?;
        }
        match (&self.step_ends, &self.ell) {
            (None, Some(_)) => return Err(schema("`ell` given without `step_ends`".into())),
            (Some(ends), Some(ell)) if ell.len() != ends.len() + 1 => {
                return Err(schema(format!(
                    "`ell` has {} entries, expected {}",
                    ell.len(),
                    ends.len() + 1
                )))
            }
            _ => {}
        }
        Ok(Rollout {
            prompt_id: self.prompt_id,
            rollout_id: self.rollout_id,
            reasoning_tokens: tokens,
            answer_correct: self.answer_correct,
            outcome_reward: outcome_reward_for(self.answer_correct),
            reasoning_length,
            step_ends: self.step_ends,
            prefix_scores: self.ell,
        })
    }
}

pub(crate) fn check_step_ends(ends: &[usize], len: usize) -> std::result::Result<(), String> {
    let mut prev = 0usize;
    for (i, &e) in ends.iter().enumerate() {
        if i > 0 && e <= prev {
            return Err("non-increasing step ends".into());
        }
        if e == 0 {
            return Err("step end 0 yields an empty step".into());
        }
        prev = e;
    }
    if prev > len {
        return Err(format!("last step end {prev} exceeds reasoning length {len}"));
    }
    Ok(())
}

/// Reads a rollout log and groups records by `prompt_id`.
///
/// Groups appear in order of first occurrence; record order is kept within a
/// group. Blank lines are ignored.
pub fn parse_rollout_log<R: BufRead>(reader: R) -> Result<Vec<RolloutGroup>> {
    parse_rollout_log_with(reader, ParseOptions::default())
}

pub fn parse_rollout_log_with<R: BufRead>(reader: R, opts: ParseOptions) -> Result<Vec<RolloutGroup>> {
    let mut groups: Vec<RolloutGroup> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RolloutRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let rollout = record.into_rollout(line_no, opts)?;
        let slot = *index.entry(rollout.prompt_id.clone()).or_insert_with(|| {
            groups.push(RolloutGroup {
                prompt_id: rollout.prompt_id.clone(),
                rollouts: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].rollouts.push(rollout);
    }
    Ok(groups)
}

/// Writes groups back in the log format, one record per line.
pub fn write_rollout_log<W: Write>(mut out: W, groups: &[RolloutGroup]) -> Result<()> {
    for g in groups {
        for r in &g.rollouts {
            let line = serde_json::to_string(&RolloutRecord::from(r)).expect("record serializes");
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// One invariant violation found by [`validate_group`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub rollout_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rollout_id {
            Some(id) => write!(f, "rollout {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Lists every invariant violation in `group`; an empty report means valid.
pub fn validate_group(group: &RolloutGroup) -> Vec<Diagnostic> {
    let mut report = Vec::new();
    if group.rollouts.is_empty() {
        report.push(Diagnostic {
            rollout_id: None,
            message: "group has no rollouts".into(),
        });
    }
    for r in &group.rollouts {
        let mut flag = |message: String| {
            report.push(Diagnostic {
                rollout_id: Some(r.rollout_id.clone()),
                message,
            })
        };
        if r.prompt_id != group.prompt_id {
            flag(format!("prompt_id {} differs from group {}", r.prompt_id, group.prompt_id));
        }
        if (r.outcome_reward > 0.0) != r.answer_correct {
            flag(format!(
                "reward/correctness mismatch: answer_correct={} outcome_reward={}",
                r.answer_correct, r.outcome_reward
            ));
        }
        if let Some(ts) = &r.reasoning_tokens {
            if ts.len() != r.reasoning_length {
                flag(format!(
                    "reasoning_length {} does not match {} tokens",
                    r.reasoning_length,
                    ts.len()
                ));
            }
        }
        if let Some(ends) = &r.step_ends {
            if let Err(m) = check_step_ends(ends, r.reasoning_length) {
                flag(m);
            }
        }
        match (&r.step_ends, &r.prefix_scores) {
            (Some(ends), Some(ell)) if ell.len() != ends.len() + 1 => flag(format!(
                "score arity: {} prefix scores for {} steps",
                ell.len(),
                ends.len()
            )),
            (None, Some(_)) => flag("score arity: prefix scores without step ends".into()),
            _ => {}
        }
        if let Some(ell) = &r.prefix_scores {
            if ell.iter().any(|v| !v.is_finite()) {
                flag("non-finite prefix score".into());
            }
        }
    }
    report
}
