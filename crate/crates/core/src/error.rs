use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },
    #[error("condition {c} outside [0, {count})")]
    ConditionOutOfRange { c: usize, count: usize },
    #[error("expected a clean sample (t = 0), got t = {0}")]
    NotClean(usize),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameter vector has length {found}, architecture needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("model is frozen and rejects parameter updates")]
    FrozenModel,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("unknown objective `{0}`")]
    UnknownObjective(String),
    #[error("degenerate pair or chain: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
