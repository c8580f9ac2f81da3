use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("arity mismatch: {0}")]
    Arity(String),

    #[error("degenerate target length 0 for a rollout of length {length}")]
    DegenerateTarget { length: usize },

    #[error("scorer failed on prefix {prefix}: {message}")]
    Scorer { prefix: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("diverged at update {update}: mean |logit| = {mean_abs_logit:.3e}")]
    Divergence { update: usize, mean_abs_logit: f64 },

    #[error("group {prompt_id}: {message}")]
    Group { prompt_id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
