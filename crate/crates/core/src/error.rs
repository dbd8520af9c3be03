use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {what}")]
    Numeric { what: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Factorization { pivot: usize, value: f64 },

    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    Vocab { token: usize, vocab_size: usize },

    #[error("invalid backbone spec: {0}")]
    Spec(String),

    #[error("rollout diverged at step {step}: {detail}")]
    Rollout { step: usize, detail: String },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("training aborted at step {step}: non-finite loss (total={total}, mse={mse}, kl={kl}, rms={rms})")]
    Training {
        step: usize,
        total: f64,
        mse: f64,
        kl: f64,
        rms: f64,
    },

    #[error("role {role}: {source}")]
    Role {
        role: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("config is missing field `{field}` in section [{section}]")]
    MissingField { section: String, field: String },

    #[error("bad container {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric { what: what.into() }
    }

    pub(crate) fn in_role(self, role: usize) -> Self {
        Error::Role {
            role,
            source: Box::new(self),
        }
    }
}
