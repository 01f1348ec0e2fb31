use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid definition: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("quadrature: {0}")]
    Quadrature(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error(
        "explicit penalty step constraint violated: max dQ = {max_dq:.6} exceeds eps/2 = {bound:.6}; \
         use at least {min_steps} steps or the implicit penalty"
    )]
    StepConstraint {
        max_dq: f64,
        bound: f64,
        min_steps: usize,
    },

    #[error("regression design rank deficient at step {step}: {detail}")]
    RankDeficient { step: usize, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(label: &str, xs: &[f64]) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!(
            "{label} has non-finite component {x}"
        )));
    }
    Ok(())
}
