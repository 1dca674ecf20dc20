use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing section `{0}`")]
    MissingSection(&'static str),
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("cycle {cycle} has zero total impedance")]
    DegenerateCycle { cycle: usize },
    #[error("voltage magnitude {magnitude} is below the floor (bus index {bus:?})")]
    DegenerateVoltage { bus: Option<usize>, magnitude: f64 },
    #[error("branch angles violate KVL (max cycle residual {max_kvl:e}); bus angles cannot be reconstructed")]
    AngleInconsistency { max_kvl: f64 },
    #[error("solver did not converge after {iterations} iterations (rho = {rho:e})")]
    NotConverged { iterations: usize, rho: f64 },
    #[error("residual plateaued at rho = {rho:e} with vanishing gradient")]
    InfeasibleRegion { rho: f64 },
    #[error("{failed} of {attempted} solves failed during dataset generation")]
    Generation { failed: usize, attempted: usize },
    #[error("network fingerprint mismatch: file has {found}, network is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("least-squares system is rank deficient (effective rank {rank} of {needed})")]
    RankDeficient { rank: usize, needed: usize },
    #[error("line search failed to find an acceptable step")]
    LineSearchFailure,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no descent along the search direction: {0}")]
    NonDescent(String),
    #[error("initial point violates bounds: {0}")]
    InfeasibleStart(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
