//! Step-gain distribution diagnostics: a histogram of monotone gains and the
//! share of high-gain steps per trajectory-length bucket.

use std::fmt::Write as _;

use crate::config::SwapConfig;
use crate::gain::AnswerScorer;
use crate::pipeline::score_rollout;
use crate::trace::RolloutGroup;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Monotone gains of one rollout alongside its reasoning length.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGains {
    pub length: usize,
    pub delta: Vec<f64>,
}

/// Histogram over monotone gains. Bin `i` covers `[edges[i], edges[i+1])`;
/// the last bin is open-ended.
#[derive(Debug, Clone, PartialEq)]
pub struct GainHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total_steps: usize,
    pub threshold: f64,
    pub high_gain_steps: usize,
    pub positive_steps: usize,
}

impl GainHistogram {
    pub fn high_gain_fraction(&self) -> f64 {
        ratio(self.high_gain_steps, self.total_steps)
    }

    pub fn positive_fraction(&self) -> f64 {
        ratio(self.positive_steps, self.total_steps)
    }
}

/// Share of high-gain steps per length bucket `[edges[i], edges[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthGainProfile {
    pub edges: Vec<usize>,
    pub steps: Vec<usize>,
    pub high_gain_steps: Vec<usize>,
}

impl LengthGainProfile {
    pub fn fractions(&self) -> Vec<f64> {
        self.steps
            .iter()
            .zip(&self.high_gain_steps)
            .map(|(&s, &h)| ratio(h, s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LengthBuckets {
    /// Edges at evenly spaced quantiles of the observed lengths.
    Quantiles(usize),
    /// Explicit increasing edges; lengths outside are clamped to the end
    /// buckets.
    Fixed(Vec<usize>),
}

impl Default for LengthBuckets {
    fn default() -> Self {
        LengthBuckets::Quantiles(5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainAnalysis {
    pub histogram: GainHistogram,
    pub profile: LengthGainProfile,
    pub rollouts: usize,
    /// Records without tokens or prefix scores.
    pub skipped: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn default_gain_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Gains for every rollout that carries prefix scores or can be scored.
/// Returns the gains and the number of skipped rollouts.
pub fn collect_gains(
    groups: &[RolloutGroup],
    cfg: &SwapConfig,
    scorer: Option<&dyn AnswerScorer>,
) -> (Vec<RolloutGains>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in groups.iter().flat_map(|g| &g.rollouts) {
        match score_rollout(r, cfg, scorer) {
            Ok((_, trace)) => out.push(RolloutGains {
                length: r.reasoning_length,
                delta: trace.delta,
            }),
            Err(_) => skipped += 1,
        }
    }
    (out, skipped)
}

pub fn gain_histogram(rollouts: &[RolloutGains], edges: &[f64], threshold: f64) -> GainHistogram {
    let mut counts = vec![0; edges.len()];
    let mut total = 0;
    let mut high = 0;
    let mut positive = 0;
    for &d in rollouts.iter().flat_map(|r| &r.delta) {
        total += 1;
        if d > threshold {
            high += 1;
        }
        if d > 0.0 {
            positive += 1;
        }
        let bin = edges.partition_point(|&e| e <= d);
        if bin > 0 {
            counts[bin - 1] += 1;
        } else if !counts.is_empty() {
            counts[0] += 1;
        }
    }
    GainHistogram {
        edges: edges.to_vec(),
        counts,
        total_steps: total,
        threshold,
        high_gain_steps: high,
        positive_steps: positive,
    }
}

fn bucket_edges(lengths: &[usize], buckets: &LengthBuckets) -> Vec<usize> {
    match buckets {
        LengthBuckets::Fixed(edges) => edges.clone(),
        LengthBuckets::Quantiles(q) => {
            if lengths.is_empty() {
                return Vec::new();
            }
            let mut sorted = lengths.to_vec();
            sorted.sort_unstable();
            let n = sorted.len();
            let q = (*q).max(1);
            let mut edges: Vec<usize> = (0..q).map(|j| sorted[j * n / q]).collect();
            edges.push(sorted[n - 1] + 1);
            edges.dedup();
            edges
        }
    }
}

pub fn length_profile(rollouts: &[RolloutGains], threshold: f64, buckets: &LengthBuckets) -> LengthGainProfile {
    let lengths: Vec<usize> = rollouts.iter().map(|r| r.length).collect();
    let edges = bucket_edges(&lengths, buckets);
    let n_buckets = edges.len().saturating_sub(1);
    let mut steps = vec![0; n_buckets];
    let mut high = vec![0; n_buckets];
    if n_buckets > 0 {
        for r in rollouts {
            let b = edges.partition_point(|&e| e <= r.length).clamp(1, n_buckets) - 1;
            steps[b] += r.delta.len();
            high[b] += r.delta.iter().filter(|&&d| d > threshold).count();
        }
    }
    LengthGainProfile {
        edges,
        steps,
        high_gain_steps: high,
    }
}

pub fn analyze(
    groups: &[RolloutGroup],
    cfg: &SwapConfig,
    scorer: Option<&dyn AnswerScorer>,
    threshold: f64,
    buckets: &LengthBuckets,
) -> GainAnalysis {
    let (gains, skipped) = collect_gains(groups, cfg, scorer);
    GainAnalysis {
        histogram: gain_histogram(&gains, &default_gain_edges(), threshold),
        profile: length_profile(&gains, threshold, buckets),
        rollouts: gains.len(),
        skipped,
    }
}

/// Long-format CSV with header `section,lo,hi,count,fraction`.
pub fn analysis_csv(a: &GainAnalysis) -> String {
    let mut s = String::from("section,lo,hi,count,fraction\n");
    let h = &a.histogram;
    for (i, &c) in h.counts.iter().enumerate() {
        let hi = h.edges.get(i + 1).map_or("inf".to_string(), |e| e.to_string());
        let _ = writeln!(s, "histogram,{},{},{},{}", h.edges[i], hi, c, ratio(c, h.total_steps));
    }
    let p = &a.profile;
    for (i, f) in p.fractions().into_iter().enumerate() {
        let _ = writeln!(s, "profile,{},{},{},{}", p.edges[i], p.edges[i + 1], p.steps[i], f);
    }
    let _ = writeln!(s, "high_gain,{},inf,{},{}", h.threshold, h.high_gain_steps, h.high_gain_fraction());
    let _ = writeln!(s, "positive_gain,0,inf,{},{}", h.positive_steps, h.positive_fraction());
    let _ = writeln!(s, "skipped,,,{},", a.skipped);
    s
}
