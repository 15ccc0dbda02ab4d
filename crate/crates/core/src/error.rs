use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("non-finite entry encountered")]
    NonFinite,
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NonPsd { min_eigenvalue: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("duplicate points {0} and {1}")]
    DuplicatePoints(usize, usize),
    #[error("k = {k} is invalid for {n} points")]
    BadK { k: usize, n: usize },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),
    #[error("energy-fraction policy needs reference signals")]
    NoReference,
    #[error("reference signals carry no energy")]
    ZeroEnergy,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("system not observable (rank {rank} < {bandwidth})")]
    NotObservable { rank: usize, bandwidth: usize },
    #[error("expected Gram matrix is singular")]
    SingularExpectedGram,
    #[error("design infeasible: {0}")]
    Infeasible(String),
    #[error("iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("Riccati iteration diverged after {iterations} iterations")]
    Divergent { iterations: usize },
    #[error("no single node yields a detectable pair")]
    DetectabilityFailure,
    #[error("reference signal is identically zero")]
    ZeroReference,
    #[error("noise variance must be positive")]
    ZeroNoise,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("inconsistent node count: {0}")]
    InconsistentNodeCount(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    /// Wraps the error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
