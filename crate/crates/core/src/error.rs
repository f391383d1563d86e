use std::path::PathBuf;

use thiserror::Error;

/// Coarse error classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling rejected {attempts} consecutive draws: {what}")]
    RejectionBudget { what: String, attempts: u32 },

    #[error("model error: {0}")]
    Model(String),

    #[error("steady state did not converge: {0}")]
    SteadyState(String),

    #[error("non-finite state at t = {t_s} s (component {component})")]
    NonFinite { t_s: u64, component: usize },

    #[error("protocol horizon {protocol_s} s does not cover the simulation horizon {required_s} s")]
    HorizonMismatch { protocol_s: u64, required_s: u64 },

    #[error("accumulator grids differ: {0}")]
    GridMismatch(String),

    #[error("empty accumulator")]
    EmptyAccumulator,

    #[error("no artifact `{id}` of kind {kind}")]
    MissingId { kind: &'static str, id: String },

    #[error("schema mismatch in {path}: expected {expected}, found {found}")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("trace not retained for patient {0}")]
    TraceNotRetained(u64),

    #[error("time window [{from_s}, {to_s}) s lies outside the trace horizon {horizon_s} s")]
    WindowOutOfRange { from_s: u64, to_s: u64, horizon_s: u64 },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parse { .. } => ErrorClass::Config,
            Error::MissingId { .. }
            | Error::Schema { .. }
            | Error::Checksum(_)
            | Error::GridMismatch(_)
            | Error::TraceNotRetained(_)
            | Error::WindowOutOfRange { .. }
            | Error::EmptyAccumulator
            | Error::Io { .. } => ErrorClass::Data,
            Error::RejectionBudget { .. }
            | Error::Model(_)
            | Error::SteadyState(_)
            | Error::NonFinite { .. }
            | Error::HorizonMismatch { .. } => ErrorClass::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
