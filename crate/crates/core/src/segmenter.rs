//! Token-budget step segmentation with line-break alignment.

use serde::{Deserialize, Serialize};

use crate::trace::Token;

/// A contiguous step `[start, end)` over the reasoning tokens. `index` is
/// 1-based; the step's reward sits on token `end - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSegment {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl StepSegment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Budget per step, raised to `ceil(n / K)` when `M` would need more than `K`
/// steps.
pub fn effective_budget(n_tokens: usize, budget: usize, max_steps: usize) -> usize {
    let budget = budget.max(1);
    let max_steps = max_steps.max(1);
    if n_tokens.div_ceil(budget) <= max_steps {
        budget
    } else {
        n_tokens.div_ceil(max_steps)
    }
}

/// Greedy segmentation into at most `max_steps` steps.
///
/// Each boundary is first placed `effective_budget` tokens past the previous
/// one and then pushed forward to just after the next token containing a line
/// break, starting with the last token inside the budget. Without a later line
/// break the boundary stays where the budget put it. The `max_steps`-th step
/// absorbs whatever is left.
pub fn segment(tokens: &[Token], budget: usize, max_steps: usize) -> Vec<StepSegment> {
    let breaks: Vec<bool> = tokens.iter().map(Token::has_line_break).collect();
    segment_by_breaks(&breaks, budget, max_steps)
}

/// [`segment`] over a precomputed line-break mask.
pub fn segment_by_breaks(breaks: &[bool], budget: usize, max_steps: usize) -> Vec<StepSegment> {
    let n = breaks.len();
    let max_steps = max_steps.max(1);
    let m = effective_budget(n, budget, max_steps);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = if out.len() + 1 == max_steps || start + m >= n {
            n
        } else {
            let tentative = start + m;
            breaks[tentative - 1..]
                .iter()
                .position(|&b| b)
                .map_or(tentative, |off| tentative + off)
        };
        out.push(StepSegment {
            index: out.len() + 1,
            start,
            end,
        });
        start = end;
    }
    out
}

pub fn step_ends(segments: &[StepSegment]) -> Vec<usize> {
    segments.iter().map(|s| s.end).collect()
}

/// Rebuilds segments from exclusive end indices.
pub fn segments_from_ends(ends: &[usize]) -> Vec<StepSegment> {
    let mut start = 0;
    ends.iter()
        .enumerate()
        .map(|(i, &end)| {
            let s = StepSegment {
                index: i + 1,
                start,
                end,
            };
            start = end;
            s
        })
        .collect()
}

/// Splits text on runs of spaces and tabs. A line break stays attached to the
/// fragment before it and closes that token.
pub fn whitespace_tokenize(text: &str) -> Vec<Token> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            ' ' | '\t' | '\r' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            '\n' => {
                if !cur.is_empty() {
                    cur.push('\n');
                    out.push(std::mem::take(&mut cur));
                } else if let Some(last) = out.last_mut() {
                    last.push('\n');
                } else {
                    out.push("\n".to_string());
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out.into_iter().filter_map(Token::new).collect()
}
