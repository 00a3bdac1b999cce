use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AicoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AicoError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty test set for feature `{0}`")]
    EmptyTestSet(String),

    #[error("degenerate support: no admissible reference value other than {0}")]
    DegenerateSupport(String),

    #[error("missing reference value for feature index {0}")]
    MissingReference(usize),

    #[error("malformed probability vector: {0}")]
    MalformedProbabilities(String),

    #[error("sample id misalignment: {0}")]
    Misaligned(String),

    #[error("gamma undefined: pmf at n={n} is numerically zero for N={trials}")]
    ZeroMass { trials: u64, n: u64 },

    #[error("insufficient sample for two-sided CI: N={0} at alpha={1}")]
    InsufficientSample(usize, f64),

    #[error(
        "target power {target} not reachable with N <= {cap}; best found N={best_n} with power {best_power}"
    )]
    PowerNotReachable {
        target: f64,
        cap: u64,
        best_n: u64,
        best_power: f64,
    },

    #[error("{file}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Bundle {
        file: PathBuf,
        line: Option<u64>,
        msg: String,
    },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report format error: {0}")]
    Report(String),
}

impl AicoError {
    pub(crate) fn bundle(file: impl Into<PathBuf>, line: Option<u64>, msg: impl Into<String>) -> Self {
        AicoError::Bundle {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AicoError::Io {
            path: path.into(),
            source,
        }
    }
}
