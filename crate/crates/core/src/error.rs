use std::path::PathBuf;

/// Errors raised across the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Mismatched shapes, layouts or inconsistent wiring between components.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the documented domain of an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A value parsed correctly but falls outside its allowed range.
    #[error("range error at line {line}: {message}")]
    Range { line: usize, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    /// Fisher information vanished everywhere, so layer shares are undefined.
    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("training diverged in round {round} on client {client}")]
    Divergence { round: u32, client: u32 },

    #[error("no noise multiplier in [{min}, {max}] meets epsilon {epsilon} at delta {delta} over {releases} releases")]
    InfeasibleBudget {
        epsilon: f64,
        delta: f64,
        releases: u32,
        min: f64,
        max: f64,
    },

    /// Operation called in a state that does not support it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("client {0} is already registered")]
    DuplicateClient(u32),

    #[error("client {0} is not registered")]
    UnknownClient(u32),

    #[error("signature verification failed for client {0}")]
    BadSignature(u32),

    #[error("transaction for round {got} does not match open round {open}")]
    RoundMismatch { open: u32, got: u32 },

    #[error("chain verification failed at block {block}: {reason}")]
    ChainInvalid { block: usize, reason: String },

    #[error("content not found: {0}")]
    NotFound(String),

    /// Stored bytes no longer hash to their address.
    #[error("integrity check failed for {0}")]
    Integrity(String),

    #[error("malformed blob: {0}")]
    Blob(String),

    #[error("io error on {path}: {source}")]
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
