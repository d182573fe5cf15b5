use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown built-in problem `{0}`")]
    UnknownProblem(String),
    #[error("unknown parameter `{key}` for problem `{problem}`")]
    UnknownParameter { problem: String, key: String },
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {context} (path {path}, step {step})")]
    NonFinite {
        context: &'static str,
        path: usize,
        step: usize,
    },
    #[error("non-finite Hamiltonian value: {0}")]
    NonFiniteHamiltonian(String),
    #[error("action {0} lies outside the action box")]
    ActionOutsideBox(String),
    #[error("missing constants: {}", .0.join(", "))]
    MissingConstants(Vec<String>),
    #[error("bound unavailable: {0}")]
    BoundUnavailable(String),
    #[error("time step {dt} too large for the state grid; need dt <= {required}")]
    TimeStepTooLarge { dt: f64, required: f64 },
    #[error("{fraction:.4} of simulated states leave the oracle grid (limit 0.01)")]
    OutsideOracleGrid { fraction: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("malformed ensemble file: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
