use std::path::PathBuf;

use thiserror::Error;

use crate::grid::Space;

/// Errors raised by the simulator and its tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("field is in {found:?} space, expected {expected:?}")]
    WrongSpace { expected: Space, found: Space },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unsupported Lp exponent {0} (expected 1, 2 or infinity)")]
    UnsupportedNorm(f64),

    #[error("field is not real: imaginary residue {0:e}")]
    NotReal(f64),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),

    #[error("invalid step configuration: {0}")]
    InvalidStep(String),

    #[error("invalid output schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite value detected at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("density formula needs t >= 1, got t = {0}")]
    EarlyTime(f64),

    #[error("fit needs at least {needed} points in window, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("fit input must be strictly positive, got {value} at t = {t}")]
    NonPositive { t: f64, value: f64 },

    #[error("phase state out of sync: ensemble at t = {ensemble}, phase at t = {phase}")]
    PhaseOutOfSync { ensemble: f64, phase: f64 },

    #[error("too many invalid phase samples ({invalid} of {total})")]
    TooManyInvalidSamples { invalid: usize, total: usize },

    #[error("no valid phase samples")]
    NoValidSamples,

    #[error("grid too large for dense crosscheck: n^3 = {0} > 512")]
    GridTooLarge(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("CSV schema error: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
