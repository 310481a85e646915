use std::path::PathBuf;

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index {index} out of range for length {len}")]
    InvalidIndex { index: usize, len: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("cannot split {rows} rows across {agents} agents")]
    TooManyAgents { rows: usize, agents: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("infeasible topology: {0}")]
    InfeasibleTopology(String),

    #[error("corrupt message: {0}")]
    CorruptMessage(String),

    #[error("no convergence, final error {final_error:e}")]
    NoConvergence { final_error: f64 },

    #[error("delay stage {stage} exceeds bound {bound}")]
    DelayBoundViolation { stage: usize, bound: usize },

    #[error("basis is not orthonormal (deviation {0:e})")]
    InvalidBasis(f64),

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
