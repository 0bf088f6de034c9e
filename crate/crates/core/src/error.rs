use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no interactions")]
    EmptyLog,

    #[error("id {0} does not fit the 32-bit index width")]
    IdOverflow(u64),

    #[error("node {node} out of range for graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("empty node set")]
    EmptySet,

    #[error("duplicate node {0} in ordered node list")]
    DuplicateNode(usize),

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("constraint infeasible: {0}")]
    Infeasible(String),

    #[error("modality {modality} not observed at query {node}")]
    ModalityNotObserved { node: usize, modality: usize },

    #[error("unknown modality {0}")]
    UnknownModality(usize),

    #[error("too many anchors: {0} (maximum 64)")]
    TooManyAnchors(usize),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("nothing to complete for item {0}")]
    NothingToComplete(usize),

    #[error("no observed modality for item {0}")]
    NoObservedModality(usize),

    #[error("empty training pool")]
    EmptyTrainingPool,

    #[error("no reconstructable slot in batch")]
    NoReconstructionTarget,

    #[error("top-P row {row} has {found} selected entries, expected {expected}")]
    BadRowWeight {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}, line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
