//! Batch shaping of rollout logs: segmentation, scoring, penalty shaping and
//! advantages for every group, emitted as shaped records.

use std::io::BufRead;

use serde::Serialize;

use crate::advantage::{group_advantages, AdvantageMap, GroupStats, RolloutSteps};
use crate::config::SwapConfig;
use crate::error::{Error, Result};
use crate::gain::{prefix_scores, AnswerScorer, ScoreTrace};
use crate::segmenter::{segment, segments_from_ends, step_ends};
use crate::shaping::{shape, target_length, ShapedRewards};
use crate::trace::{parse_rollout_log, validate_group, Rollout, RolloutGroup, RolloutRecord};

/// Everything computed for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRollout {
    pub step_ends: Vec<usize>,
    pub trace: ScoreTrace,
    pub shaped: ShapedRewards,
    pub advantage: AdvantageMap,
}

/// Step ends and prefix scores for a rollout, preferring precomputed values.
pub fn score_rollout(
    rollout: &Rollout,
    cfg: &SwapConfig,
    scorer: Option<&dyn AnswerScorer>,
) -> Result<(Vec<usize>, ScoreTrace)> {
    let tokens = rollout.tokens();
    let ends = match &rollout.step_ends {
        Some(e) => e.clone(),
        None => step_ends(&segment(tokens, cfg.step_budget, cfg.max_steps)),
    };
    let ell = match &rollout.prefix_scores {
        Some(ell) => ell.clone(),
        None => {
            let scorer = scorer.ok_or_else(|| Error::Scorer {
                prefix: 0,
                message: "no precomputed `ell` and no scorer available".into(),
            })?;
            if rollout.reasoning_tokens.is_none() {
                return Err(Error::Scorer {
                    prefix: 0,
                    message: "rollout has neither tokens nor `ell`".into(),
                });
            }
            prefix_scores(scorer, &rollout.prompt_id, "", &segments_from_ends(&ends), tokens)?
        }
    };
    Ok((ends, ScoreTrace::from_scores(ell)))
}

/// Runs the full shaping pipeline on one group.
pub fn shape_group(
    group: &RolloutGroup,
    cfg: &SwapConfig,
    scorer: Option<&dyn AnswerScorer>,
) -> Result<(GroupStats, Vec<ShapedRollout>)> {
    let fail = |rollout_id: &str, e: Error| Error::Group {
        prompt_id: group.prompt_id.clone(),
        message: format!("rollout {rollout_id}: {e}"),
    };
    let target = target_length(group);
    let mut partial = Vec::with_capacity(group.len());
    for r in &group.rollouts {
        let (ends, trace) = score_rollout(r, cfg, scorer).map_err(|e| fail(&r.rollout_id, e))?;
        let shaped = shape(&trace, r.reasoning_length, target, cfg).map_err(|e| fail(&r.rollout_id, e))?;
        partial.push((ends, trace, shaped));
    }
    let steps: Vec<RolloutSteps<'_>> = group
        .rollouts
        .iter()
        .zip(&partial)
        .map(|(r, (ends, _, shaped))| RolloutSteps {
            outcome_reward: r.outcome_reward,
            step_rewards: &shaped.step_rewards,
            step_ends: ends,
            n_tokens: r.reasoning_length,
        })
        .collect();
    let (stats, maps) = group_advantages(&steps, cfg).map_err(|e| Error::Group {
        prompt_id: group.prompt_id.clone(),
        message: e.to_string(),
    })?;
    let out = partial
        .into_iter()
        .zip(maps)
        .map(|((step_ends, trace, shaped), advantage)| ShapedRollout {
            step_ends,
            trace,
            shaped,
            advantage,
        })
        .collect();
    Ok((stats, out))
}

/// Output line of the `shape` command: the input record (with step ends and
/// prefix scores filled in) plus every computed quantity.
#[derive(Debug, Clone, Serialize)]
pub struct ShapedRecord {
    #[serde(flatten)]
    pub record: RolloutRecord,
    pub outcome_reward: f64,
    pub delta: Vec<f64>,
    pub local_gain: Vec<f64>,
    pub target_length: Option<usize>,
    pub penalty_mass: f64,
    pub weights: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub normalized_step_rewards: Vec<f64>,
    pub outcome_advantage: f64,
    /// `(end_index, value)` pieces over 1-based reasoning token positions.
    pub unified_advantage: Vec<(usize, f64)>,
}

impl ShapedRecord {
    pub fn new(rollout: &Rollout, shaped: &ShapedRollout) -> Self {
        let mut record = RolloutRecord::from(rollout);
        record.step_ends = Some(shaped.step_ends.clone());
        record.ell = Some(shaped.trace.ell.clone());
        ShapedRecord {
            record,
            outcome_reward: rollout.outcome_reward,
            delta: shaped.trace.delta.clone(),
            local_gain: shaped.trace.local_gain.clone(),
            target_length: shaped.shaped.target_length,
            penalty_mass: shaped.shaped.penalty_mass,
            weights: shaped.shaped.weights.clone(),
            step_rewards: shaped.shaped.step_rewards.clone(),
            normalized_step_rewards: shaped.advantage.normalized_step_rewards.clone(),
            outcome_advantage: shaped.advantage.outcome_adv,
            unified_advantage: shaped.advantage.unified_adv.coalesced().pieces().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ShapeOutput {
    /// Newline-terminated JSON records in input order.
    pub text: String,
    pub records: usize,
    pub warnings: Vec<String>,
}

/// Parses a rollout log and shapes every group.
///
/// A group that fails validation or shaping aborts the run unless `lenient`,
/// in which case it is skipped with a warning.
pub fn shape_log<R: BufRead>(
    input: R,
    cfg: &SwapConfig,
    scorer: Option<&dyn AnswerScorer>,
    lenient: bool,
) -> Result<ShapeOutput> {
    cfg.validate()?;
    let groups = parse_rollout_log(input)?;
    let results = par_map(&groups, |group| {
        let report = validate_group(group);
        if let Some(first) = report.first() {
            return Err(Error::Group {
                prompt_id: group.prompt_id.clone(),
                message: first.to_string(),
            });
        }
        let (_, shaped) = shape_group(group, cfg, scorer)?;
        let mut text = String::new();
        for (r, s) in group.rollouts.iter().zip(&shaped) {
            text.push_str(&serde_json::to_string(&ShapedRecord::new(r, s)).expect("record serializes"));
            text.push('\n');
        }
        Ok((text, shaped.len()))
    });
    let mut out = ShapeOutput::default();
    for result in results {
        match result {
            Ok((text, n)) => {
                out.text.push_str(&text);
                out.records += n;
            }
            Err(e) if lenient => out.warnings.push(format!("skipped: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Maps `f` over `items` on scoped worker threads, returning results in
/// input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ShapingMode;

    const LOG: &str = r#"{"prompt_id":"p","rollout_id":"a","text":"one two\nthree four\n","answer_correct":true,"step_ends":[2,4],"ell":[-2.0,-1.0,-0.5]}
{"prompt_id":"p","rollout_id":"b","text":"one two\nthree four\nfive six\n","answer_correct":true,"step_ends":[2,4,6],"ell":[-2.0,-1.5,-1.5,-0.5]}
{"prompt_id":"p","rollout_id":"c","text":"x y\nz w\n","answer_correct":false,"step_ends":[2,4],"ell":[-2.0,-1.8,-1.9]}
{"prompt_id":"p","rollout_id":"d","text":"x y\nz w\nv u\n","answer_correct":false,"step_ends":[2,4,6],"ell":[-2.0,-2.0,-2.0,-2.0]}
"#;

    fn parsed(text: &str) -> Vec<serde_json::Value> {
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn incorrect_records_are_constant() {
        let out = shape_log(LOG.as_bytes(), &SwapConfig::default(), None, false).unwrap();
        assert_eq!(out.records, 4);
        let recs = parsed(&out.text);
        for rec in &recs[2..] {
            assert_eq!(rec["unified_advantage"].as_array().unwrap().len(), 1, "{rec}");
        }
        // the longer correct rollout is over the lower-median target of 4
        assert_eq!(recs[1]["target_length"], 4);
        assert!((recs[1]["penalty_mass"].as_f64().unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(recs[0]["penalty_mass"], 0.0);
    }

    #[test]
    fn no_correct_rollouts_means_no_penalty() {
        let log = LOG.replace("\"answer_correct\":true", "\"answer_correct\":false");
        let out = shape_log(log.as_bytes(), &SwapConfig::default(), None, false).unwrap();
        for rec in parsed(&out.text) {
            assert_eq!(rec["penalty_mass"], 0.0);
            assert!(rec["target_length"].is_null());
            assert_eq!(rec["unified_advantage"].as_array().unwrap().len(), 1);
        }
    }

    #[test]
    fn output_is_a_valid_rollout_log() {
        let out = shape_log(LOG.as_bytes(), &SwapConfig::default(), None, false).unwrap();
        let groups = parse_rollout_log(out.text.as_bytes()).unwrap();
        assert_eq!(groups[0].len(), 4);
    }

    #[test]
    fn missing_scores_need_a_scorer() {
        let log = r#"{"prompt_id":"p","rollout_id":"a","text":"a b\n","answer_correct":true}
{"prompt_id":"q","rollout_id":"b","text":"a b\n","answer_correct":true,"step_ends":[2],"ell":[-1,0]}
"#;
        let err = shape_log(log.as_bytes(), &SwapConfig::default(), None, false).unwrap_err();
        assert!(err.to_string().contains("rollout a"), "{err}");
        let out = shape_log(log.as_bytes(), &SwapConfig::default(), None, true).unwrap();
        assert_eq!(out.records, 1);
        assert_eq!(out.warnings.len(), 1);
        let scorer = |_: &str, steps: &[&[crate::trace::Token]], _: &str| Ok(steps.len() as f64 - 1.0);
        let out = shape_log(log.as_bytes(), &SwapConfig::default(), Some(&scorer), false).unwrap();
        assert_eq!(out.records, 2);
    }

    #[test]
    fn step_only_drops_outcome_term() {
        let mut cfg = SwapConfig::default();
        cfg.shaping_mode = ShapingMode::StepOnly;
        let out = shape_log(LOG.as_bytes(), &cfg, None, false).unwrap();
        let recs = parsed(&out.text);
        assert_eq!(recs[3]["unified_advantage"][0][1], 0.0);
    }
}
