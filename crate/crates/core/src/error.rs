use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the exit-code class the CLI maps them onto:
/// configuration problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown element symbol `{0}`")]
    UnknownElement(String),

    #[error("atomic number {0} has no row in the atom feature table")]
    UnknownSpecies(u8),

    #[error("singular lattice (determinant {0:e})")]
    SingularLattice(f64),

    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("image budget exceeded: {needed} periodic images needed, cap is {cap}")]
    ImageBudgetExceeded { needed: usize, cap: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite loss {value} (structure {id})")]
    NonFiniteLoss { value: f64, id: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } | Error::Shape { .. } | Error::ZeroVector => 4,
            _ => 3,
        }
    }
}
