//! Prefix answer scores and the step gains derived from them.

use crate::error::{Error, Result};
use crate::segmenter::StepSegment;
use crate::trace::Token;

/// Scores how strongly a reasoning prefix supports the reference answer:
/// the average per-token log-probability of `answer` given the prompt and the
/// first `steps.len()` steps.
///
/// Implementations must be deterministic and safe to call concurrently.
pub trait AnswerScorer: Sync {
    fn score(&self, prompt: &str, steps: &[&[Token]], answer: &str) -> std::result::Result<f64, String>;
}

impl<F> AnswerScorer for F
where
    F: Fn(&str, &[&[Token]], &str) -> std::result::Result<f64, String> + Sync,
{
    fn score(&self, prompt: &str, steps: &[&[Token]], answer: &str) -> std::result::Result<f64, String> {
        self(prompt, steps, answer)
    }
}

/// Prefix scores `ell[0..=K]` with their monotone and local gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub ell: Vec<f64>,
    pub delta: Vec<f64>,
    pub local_gain: Vec<f64>,
}

impl ScoreTrace {
    /// `ell` must hold at least the baseline score.
    pub fn from_scores(ell: Vec<f64>) -> Self {
        let delta = monotone_gain(&ell);
        let local_gain = local_gain(&ell);
        ScoreTrace {
            ell,
            delta,
            local_gain,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.delta.len()
    }
}

/// Scores the empty prefix and each prefix of whole steps, once each.
pub fn prefix_scores(
    scorer: &dyn AnswerScorer,
    prompt: &str,
    answer: &str,
    segments: &[StepSegment],
    tokens: &[Token],
) -> Result<Vec<f64>> {
    let steps: Vec<&[Token]> = segments.iter().map(|s| &tokens[s.start..s.end]).collect();
    (0..=steps.len())
        .map(|k| {
            let v = scorer
                .score(prompt, &steps[..k], answer)
                .map_err(|message| Error::Scorer { prefix: k, message })?;
            if !v.is_finite() {
                return Err(Error::Scorer {
                    prefix: k,
                    message: format!("non-finite score {v}"),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Gain of each step over the best score seen before it (baseline included),
/// floored at zero.
pub fn monotone_gain(ell: &[f64]) -> Vec<f64> {
    let Some((&first, rest)) = ell.split_first() else {
        return Vec::new();
    };
    let mut best = first;
    rest.iter()
        .map(|&v| {
            let d = (v - best).max(0.0);
            best = best.max(v);
            d
        })
        .collect()
}

/// `ell[k] - ell[k-1]` for each step; may be negative.
pub fn local_gain(ell: &[f64]) -> Vec<f64> {
    ell.windows(2).map(|w| w[1] - w[0]).collect()
}
