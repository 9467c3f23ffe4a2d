use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the engine reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} has {lhs_len}, {rhs} has {rhs_len}")]
    DimensionMismatch {
        op: &'static str,
        lhs: &'static str,
        lhs_len: usize,
        rhs: &'static str,
        rhs_len: usize,
    },

    #[error("cannot l2-normalize a vector of norm {norm:e} (threshold {threshold:e})")]
    DegenerateNorm { norm: f64, threshold: f64 },

    #[error("PDDM {branch} branch collapsed to zero before normalization")]
    DegenerateBranch { branch: &'static str },

    #[error("input to {op} is not unit-norm (norm {norm})")]
    NotUnitNorm { op: &'static str, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid layer dims {0:?}: need at least two positive entries")]
    InvalidDims(Vec<usize>),

    #[error("batch contains no positive pair")]
    NoPositivePair,

    #[error("sample {0} has no negative partner in the batch")]
    NoNegativePartner(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("synthetic data does not show the heterogeneity phenomenon: {0}")]
    PhenomenonNotAchieved(String),

    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },

    #[error("duplicate sample id {id} at row {row}")]
    DuplicateId { id: u64, row: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint {path}: format version {found} is not supported (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path} is corrupt: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint {what} mismatch: checkpoint has {found}, config expects {expected}")]
    CheckpointShape {
        what: &'static str,
        found: String,
        expected: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(
    op: &'static str,
    lhs: &'static str,
    lhs_len: usize,
    rhs: &'static str,
    rhs_len: usize,
) -> Result<()> {
    if lhs_len == rhs_len {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            op,
            lhs,
            lhs_len,
            rhs,
            rhs_len,
        })
    }
}
