//! Desk-scale training lab.
//!
//! A synthetic reasoning task where each action either states one of `F`
//! required facts, emits filler, or stops and answers. The answer is correct
//! iff every fact was stated. An oracle scorer plays the role of the model's
//! answer log-probability: it rises by `fact_gain` for each distinct fact in
//! the prefix and ignores everything else, so step utility is known exactly.
//!
//! The policy is a logit table indexed by the set of facts stated so far. It
//! is trained on-policy with the full shaping and advantage pipeline and the
//! clipped surrogate objective, one plain gradient step per sampled group.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::advantage::mode_weights;
use crate::config::{parse_kv, parse_value, SwapConfig};
use crate::error::{Error, Result};
use crate::gain::AnswerScorer;
use crate::objective::{grpo_grad, grpo_loss, TokenBatch};
use crate::pipeline::{score_rollout, shape_group};
use crate::trace::{Rollout, RolloutGroup, Token};

/// Largest supported fact count; the policy table has `2^F` rows.
pub const MAX_FACTS: usize = 6;

const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub n_facts: usize,
    pub fact_gain: f64,
    pub base_score: f64,
    pub filler_templates: usize,
}

impl Default for SynthTask {
    fn default() -> Self {
        SynthTask::new(3, 0.8, 2)
    }
}

impl SynthTask {
    /// Task whose oracle score reaches 0 once all facts are stated.
    pub fn new(n_facts: usize, fact_gain: f64, filler_templates: usize) -> Self {
        SynthTask {
            n_facts,
            fact_gain,
            base_score: -(n_facts as f64) * fact_gain,
            filler_templates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_facts == 0 || self.n_facts > MAX_FACTS {
            return Err(Error::Config(format!("n_facts must be in 1..={MAX_FACTS}")));
        }
        if !(self.fact_gain > 0.0) || !self.base_score.is_finite() {
            return Err(Error::Config("fact_gain must be > 0 and base_score finite".into()));
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        self.n_facts + self.filler_templates + 1
    }

    pub fn n_states(&self) -> usize {
        1 << self.n_facts
    }

    pub fn action(&self, index: usize) -> Action {
        if index < self.n_facts {
            Action::Fact(index)
        } else if index < self.n_facts + self.filler_templates {
            Action::Filler(index - self.n_facts)
        } else {
            Action::Stop
        }
    }

    pub fn all_facts(&self) -> usize {
        self.n_states() - 1
    }

    /// Oracle score of a prefix that has stated `distinct_facts` facts.
    pub fn score_for(&self, distinct_facts: usize) -> f64 {
        self.base_score + distinct_facts as f64 * self.fact_gain
    }

    pub fn scorer(&self) -> OracleScorer<'_> {
        OracleScorer { task: self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Fact(usize),
    Filler(usize),
    Stop,
}

/// Token block emitted by a reasoning action: a marker token, padding, and a
/// trailing line break on the last token.
pub fn action_tokens(action: Action, block: usize) -> Vec<Token> {
    let marker = match action {
        Action::Fact(i) => format!("<fact:{}>", i + 1),
        Action::Filler(j) => format!("<filler:{}>", j + 1),
        Action::Stop => "<answer>".to_string(),
    };
    let block = block.max(1);
    let mut out: Vec<String> = Vec::with_capacity(block);
    out.push(marker);
    out.extend((1..block).map(|i| format!("w{i}")));
    out.last_mut().expect("non-empty block").push('\n');
    out.into_iter().map(|s| Token::new(s).expect("non-empty")).collect()
}

/// Fact index named by a marker token, if any.
pub fn fact_marker(token: &Token) -> Option<usize> {
    let s = token.as_str().trim_end();
    let n: usize = s.strip_prefix("<fact:")?.strip_suffix('>')?.parse().ok()?;
    n.checked_sub(1)
}

/// Answer scorer backed by the task's closed-form oracle.
#[derive(Debug, Clone, Copy)]
pub struct OracleScorer<'a> {
    task: &'a SynthTask,
}

impl AnswerScorer for OracleScorer<'_> {
    fn score(&self, _prompt: &str, steps: &[&[Token]], _answer: &str) -> std::result::Result<f64, String> {
        let mut seen = 0u64;
        for t in steps.iter().flat_map(|s| s.iter()) {
            if let Some(i) = fact_marker(t) {
                if i < self.task.n_facts {
                    seen |= 1 << i;
                }
            }
        }
        Ok(self.task.score_for(seen.count_ones() as usize))
    }
}

/// Logit table over actions, one row per set of already-stated facts.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    n_actions: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(task: &SynthTask, fact_logit: f64, filler_logit: f64, stop_logit: f64) -> Self {
        let n_actions = task.n_actions();
        let row: Vec<f64> = (0..n_actions)
            .map(|a| match task.action(a) {
                Action::Fact(_) => fact_logit,
                Action::Filler(_) => filler_logit,
                Action::Stop => stop_logit,
            })
            .collect();
        let logits = row.iter().copied().cycle().take(n_actions * task.n_states()).collect();
        ToyPolicy { n_actions, logits }
    }

    /// Policy that follows `script` with probability one when read state by
    /// state: in every state the scripted action gets a dominating logit.
    pub fn scripted(task: &SynthTask, script: &[(usize, usize)]) -> Self {
        let mut p = ToyPolicy::new(task, -1e2, -1e2, -1e2);
        for &(state, action) in script {
            p.logits[state * p.n_actions + action] = 1e2;
        }
        p
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.logits.len() / self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row[action] - lse
    }

    pub fn mean_abs_logit(&self) -> f64 {
        self.logits.iter().map(|v| v.abs()).sum::<f64>() / self.logits.len() as f64
    }

    fn sample(&self, state: usize, rng: &mut impl Rng) -> usize {
        let probs = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }
}

/// Actions taken by one sampled rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// Log-probability of each action under the sampling policy.
    pub logps: Vec<f64>,
    /// Whether the last action is an explicit stop.
    pub stopped: bool,
}

impl Trajectory {
    /// Number of reasoning actions (stop excluded).
    pub fn reasoning_actions(&self) -> usize {
        self.actions.len() - usize::from(self.stopped)
    }
}

#[derive(Debug, Clone)]
pub struct SimGroup {
    pub group: RolloutGroup,
    pub trajectories: Vec<Trajectory>,
}

/// Stream seed for rollout `index` of the group drawn with `seed`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples `n` rollouts of the task. Each rollout draws from its own stream
/// derived from `seed`.
pub fn rollout_group(
    policy: &ToyPolicy,
    task: &SynthTask,
    n: usize,
    max_actions: usize,
    tokens_per_action: usize,
    prompt_id: &str,
    seed: u64,
) -> SimGroup {
    let mut rollouts = Vec::with_capacity(n);
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
        let mut state = 0usize;
        let mut traj = Trajectory {
            states: Vec::new(),
            actions: Vec::new(),
            logps: Vec::new(),
            stopped: false,
        };
        let mut tokens = Vec::new();
        while traj.actions.len() < max_actions {
            let a = policy.sample(state, &mut rng);
            traj.states.push(state);
            traj.actions.push(a);
            traj.logps.push(policy.log_prob(state, a));
            match task.action(a) {
                Action::Stop => {
                    traj.stopped = true;
                    break;
                }
                act => {
                    tokens.extend(action_tokens(act, tokens_per_action));
                    if let Action::Fact(f) = act {
                        state |= 1 << f;
                    }
                }
            }
        }
        let correct = state == task.all_facts();
        rollouts.push(Rollout::from_tokens(prompt_id, format!("{prompt_id}-r{i}"), tokens, correct));
        trajectories.push(traj);
    }
    SimGroup {
        group: RolloutGroup {
            prompt_id: prompt_id.to_string(),
            rollouts,
        },
        trajectories,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub swap: SwapConfig,
    pub task: SynthTask,
    pub learning_rate: f64,
    pub updates: usize,
    /// Action cap per rollout; a rollout that hits it answers anyway.
    pub rollout_max_steps: usize,
    pub tokens_per_action: usize,
    pub seed: u64,
    pub init_fact_logit: f64,
    pub init_filler_logit: f64,
    pub init_stop_logit: f64,
    /// Updates averaged for the initial / final summaries.
    pub metric_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tokens_per_action = 30;
        TrainConfig {
            swap: SwapConfig {
                step_budget: tokens_per_action,
                ..SwapConfig::default()
            },
            task: SynthTask::default(),
            learning_rate: 2.0,
            updates: 2000,
            rollout_max_steps: 24,
            tokens_per_action,
            seed: 7,
            init_fact_logit: 0.0,
            init_filler_logit: 1.0,
            init_stop_logit: -0.5,
            metric_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.swap.validate()?;
        self.task.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.updates == 0 {
            return Err(Error::Config("updates must be >= 1".into()));
        }
        if self.rollout_max_steps == 0 || self.tokens_per_action == 0 || self.metric_window == 0 {
            return Err(Error::Config(
                "rollout_max_steps, tokens_per_action and metric_window must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Sets a field by config-file name, including the nested shaping and
    /// task fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.swap.set(key, value)? {
            return Ok(());
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "updates" => self.updates = parse_value(key, value)?,
            "rollout_max_steps" => self.rollout_max_steps = parse_value(key, value)?,
            "tokens_per_action" => self.tokens_per_action = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "init_fact_logit" => self.init_fact_logit = parse_value(key, value)?,
            "init_filler_logit" => self.init_filler_logit = parse_value(key, value)?,
            "init_stop_logit" => self.init_stop_logit = parse_value(key, value)?,
            "metric_window" => self.metric_window = parse_value(key, value)?,
            "n_facts" => {
                let gain = self.task.fact_gain;
                self.task = SynthTask::new(parse_value(key, value)?, gain, self.task.filler_templates);
            }
            "fact_gain" => {
                self.task = SynthTask::new(self.task.n_facts, parse_value(key, value)?, self.task.filler_templates);
            }
            "base_score" => self.task.base_score = parse_value(key, value)?,
            "filler_templates" => self.task.filler_templates = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_kv(text)? {
            self.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    pub fn initial_policy(&self) -> ToyPolicy {
        ToyPolicy::new(&self.task, self.init_fact_logit, self.init_filler_logit, self.init_stop_logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub update: usize,
    pub mean_length: f64,
    pub accuracy: f64,
    pub mean_advantage: f64,
    pub loss: f64,
    pub mean_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainMetrics {
    pub records: Vec<UpdateRecord>,
}

/// Averages over a window of updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSummary {
    pub mean_length: f64,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "update,mean_length,accuracy,loss,mean_penalty";

impl TrainMetrics {
    fn summarize(records: &[UpdateRecord]) -> WindowSummary {
        let n = records.len().max(1) as f64;
        WindowSummary {
            mean_length: records.iter().map(|r| r.mean_length).sum::<f64>() / n,
            accuracy: records.iter().map(|r| r.accuracy).sum::<f64>() / n,
        }
    }

    pub fn initial(&self, window: usize) -> WindowSummary {
        let w = window.min(self.records.len());
        Self::summarize(&self.records[..w])
    }

    pub fn last(&self, window: usize) -> WindowSummary {
        let w = window.min(self.records.len());
        Self::summarize(&self.records[self.records.len() - w..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.update, r.mean_length, r.accuracy, r.loss, r.mean_penalty);
        }
        s
    }
}

/// Result of a training run, including the policy it started from and ended
/// with.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub metrics: TrainMetrics,
    pub initial_policy: ToyPolicy,
    pub final_policy: ToyPolicy,
}

/// Token-level batch for one sampled group plus the action each token
/// belongs to.
struct GroupBatch {
    batch: TokenBatch,
    /// `(rollout, action position)` of each token.
    owner: Vec<(usize, usize)>,
    /// Token count of each action's block, per rollout.
    block_len: Vec<Vec<usize>>,
    mean_penalty: f64,
}

fn build_batch(sim: &SimGroup, cfg: &TrainConfig, policy: &ToyPolicy) -> Result<GroupBatch> {
    let scorer = cfg.task.scorer();
    let (_, shaped) = shape_group(&sim.group, &cfg.swap, Some(&scorer))?;
    let (beta, _) = mode_weights(&cfg.swap);
    let tpa = cfg.tokens_per_action;
    let mut logp_new = Vec::new();
    let mut logp_old = Vec::new();
    let mut adv = Vec::new();
    let mut rollout = Vec::new();
    let mut owner = Vec::new();
    let mut block_len = Vec::with_capacity(sim.trajectories.len());
    let mut penalty = 0.0;
    for (i, (traj, s)) in sim.trajectories.iter().zip(&shaped).enumerate() {
        penalty += s.shaped.penalty_mass;
        let unified = s.advantage.unified_adv.expand();
        let mut lens = Vec::with_capacity(traj.actions.len());
        for (j, (&state, &action)) in traj.states.iter().zip(&traj.actions).enumerate() {
            let current = policy.log_prob(state, action);
            let is_stop = traj.stopped && j + 1 == traj.actions.len();
            let len = if is_stop { 1 } else { tpa };
            lens.push(len);
            for k in 0..len {
                let value = if is_stop {
                    beta * s.advantage.outcome_adv
                } else {
                    unified[j * tpa + k]
                };
                logp_new.push(current / len as f64);
                logp_old.push(traj.logps[j] / len as f64);
                adv.push(value);
                rollout.push(i);
                owner.push((i, j));
            }
        }
        block_len.push(lens);
    }
    let batch = TokenBatch::new(logp_new, logp_old, adv, rollout)?.with_weighting(cfg.swap.loss_weighting);
    Ok(GroupBatch {
        batch,
        owner,
        block_len,
        mean_penalty: penalty / sim.trajectories.len() as f64,
    })
}

/// Runs the on-policy loop and keeps the final policy.
pub fn train_run(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let initial_policy = cfg.initial_policy();
    let mut policy = initial_policy.clone();
    let n_actions = policy.n_actions();
    let mut records = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let sim = rollout_group(
            &policy,
            &cfg.task,
            cfg.swap.group_size,
            cfg.rollout_max_steps,
            cfg.tokens_per_action,
            "synth",
            derive_seed(cfg.seed, update as u64, 1),
        );
        let gb = build_batch(&sim, cfg, &policy)?;
        let loss = grpo_loss(&gb.batch, cfg.swap.eps_clip);
        let token_grad = grpo_grad(&gb.batch, cfg.swap.eps_clip);

        // d loss / d logp(action): each token holds logp(action) / block_len
        let mut action_grad: Vec<Vec<f64>> = sim.trajectories.iter().map(|t| vec![0.0; t.actions.len()]).collect();
        for (g, &(i, j)) in token_grad.iter().zip(&gb.owner) {
            action_grad[i][j] += g / gb.block_len[i][j] as f64;
        }
        let mut grad = vec![0.0; policy.logits.len()];
        for (traj, ag) in sim.trajectories.iter().zip(&action_grad) {
            for ((&state, &action), &g) in traj.states.iter().zip(&traj.actions).zip(ag) {
                if g == 0.0 {
                    continue;
                }
                let probs = policy.probs(state);
                let row = &mut grad[state * n_actions..(state + 1) * n_actions];
                for (b, p) in probs.iter().enumerate() {
                    let indicator = if b == action { 1.0 } else { 0.0 };
                    row[b] += g * (indicator - p);
                }
            }
        }
        if cfg.learning_rate != 0.0 {
            for (l, g) in policy.logits.iter_mut().zip(&grad) {
                *l -= cfg.learning_rate * g;
            }
        }

        let n = sim.group.len() as f64;
        let weights = gb.batch.token_weights();
        records.push(UpdateRecord {
            update,
            mean_length: sim.group.rollouts.iter().map(|r| r.reasoning_length as f64).sum::<f64>() / n,
            accuracy: sim.group.rollouts.iter().filter(|r| r.answer_correct).count() as f64 / n,
            mean_advantage: gb.batch.adv.iter().zip(&weights).map(|(a, w)| a * w).sum(),
            loss,
            mean_penalty: gb.mean_penalty,
        });

        let mal = policy.mean_abs_logit();
        if !(mal <= DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                update,
                mean_abs_logit: mal,
            });
        }
    }
    Ok(TrainRun {
        metrics: TrainMetrics { records },
        initial_policy,
        final_policy: policy,
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainMetrics> {
    train_run(cfg).map(|r| r.metrics)
}

/// Samples `n_groups` groups from `policy` and attaches oracle step ends and
/// prefix scores, ready to be written as a rollout log.
pub fn sample_log(policy: &ToyPolicy, cfg: &TrainConfig, n_groups: usize, seed: u64) -> Result<Vec<RolloutGroup>> {
    let scorer = cfg.task.scorer();
    (0..n_groups)
        .map(|g| {
            let mut sim = rollout_group(
                policy,
                &cfg.task,
                cfg.swap.group_size,
                cfg.rollout_max_steps,
                cfg.tokens_per_action,
                &format!("synth-{g}"),
                derive_seed(seed, g as u64, 2),
            );
            for r in &mut sim.group.rollouts {
                let (ends, trace) = score_rollout(r, &cfg.swap, Some(&scorer))?;
                r.step_ends = Some(ends);
                r.prefix_scores = Some(trace.ell);
            }
            Ok(sim.group)
        })
        .collect()
}

/// One cell of a parameter sweep.
#[derive(Debug)]
pub struct SweepCell {
    pub value: String,
    pub result: Result<TrainMetrics>,
}

/// Trains once per value of `key`, all runs sharing the base seed. A failing
/// cell does not stop the sweep.
pub fn sweep(base: &TrainConfig, key: &str, values: &[String]) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            let result = cfg.set(key, v).and_then(|_| train(&cfg));
            SweepCell {
                value: v.clone(),
                result,
            }
        })
        .collect())
}

pub const SWEEP_HEADER: &str =
    "param,value,initial_mean_length,final_mean_length,initial_accuracy,final_accuracy,status";

/// Comparison table over sweep cells, summarizing `window` updates at each end.
pub fn sweep_table(key: &str, cells: &[SweepCell], window: usize) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for c in cells {
        match &c.result {
            Ok(m) => {
                let (a, b) = (m.initial(window), m.last(window));
                let _ = writeln!(
                    s,
                    "{key},{},{},{},{},{},ok",
                    c.value, a.mean_length, b.mean_length, a.accuracy, b.accuracy
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{key},{},,,,,\"{}\"", c.value, e.to_string().replace('"', "'"));
            }
        }
    }
    s
}
