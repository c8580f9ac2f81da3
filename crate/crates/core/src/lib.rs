//! Stepwise adaptive length penalization for chain-of-thought RL.
//!
//! The pipeline runs per prompt group:
//!
//! 1. [`segmenter`] splits each rollout's reasoning tokens into at most `K`
//!    steps of roughly `M` tokens, aligned to line breaks.
//! 2. [`gain`] scores every prefix with an [`gain::AnswerScorer`] and derives
//!    the monotone information gain and the raw local gain of each step.
//! 3. [`shaping`] turns excess length over the group's target into a penalty
//!    mass and spreads it over steps, heavier on low-gain steps.
//! 4. [`advantage`] builds the group-relative outcome advantage, normalizes
//!    step rewards over correct rollouts and propagates them backwards into a
//!    piecewise-constant token-level advantage.
//! 5. [`objective`] evaluates the clipped surrogate loss and its gradient.
//!
//! [`simlab`] wires all of it into an on-policy training loop over a synthetic
//! facts-and-filler task, and [`pipeline`] / [`analysis`] back the CLI.

pub mod advantage;
pub mod analysis;
pub mod config;
pub mod error;
pub mod gain;
pub mod objective;
pub mod pipeline;
pub mod segmenter;
pub mod shaping;
pub mod simlab;
pub mod trace;

pub use advantage::{AdvantageMap, GroupStats, Piecewise};
pub use config::{ShapingMode, SwapConfig};
pub use error::{Error, Result};
pub use gain::{AnswerScorer, ScoreTrace};
pub use objective::{LossWeighting, TokenBatch};
pub use segmenter::StepSegment;
pub use shaping::ShapedRewards;
pub use simlab::{SynthTask, ToyPolicy, TrainConfig, TrainMetrics};
pub use trace::{Rollout, RolloutGroup, Token};
