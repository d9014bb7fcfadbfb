use thiserror::Error;

/// Failures surfaced by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no nontrivial stripe at mu={mu}, k={k}")]
    NoNontrivialStripe { mu: f64, k: f64 },
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("continuation broke down at k={failed_k} (last good k: {last_good_k:?})")]
    ContinuationBreakdown { last_good_k: Option<f64>, failed_k: f64 },
    #[error("linearization is singular in the even subspace")]
    SingularLinearization,
    #[error("eigenvalue branch is ambiguous at sigma={sigma}")]
    BranchCrossing { sigma: f64 },
    #[error("hypothesis violated: {clause}")]
    HypothesisViolated { clause: String },
    #[error("identity {name} violated, residual {residual:e}")]
    IdentityViolation { name: String, residual: f64 },
    #[error("local wavenumber {k} outside the continued range [{lo}, {hi}]")]
    OutOfBand { k: f64, lo: f64, hi: f64 },
    #[error("|lambda2| = {0:e} is too small")]
    ZeroDiffusivity(f64),
    #[error("impurity tail bound {0:e} exceeds tolerance")]
    TailBoundExceeded(f64),
    #[error("Newton diverged; residual history {history:?}")]
    NewtonDivergence { history: Vec<f64> },
    #[error("core correction does not decay (envelope ratio {0})")]
    DecayViolation(f64),
    #[error("far-field fit failed, window correlation {0}")]
    FitFailure(f64),
    #[error("kernel subspace mismatch, angle {0:e}")]
    SubspaceMismatch(f64),
    #[error("no clean singular value gap (candidates {small} / {large})")]
    NoCleanGap { small: usize, large: usize },
    #[error("dimensions change under refinement: {coarse:?} at N={n} vs {fine:?} at 2N")]
    UnstableDims { n: usize, coarse: (usize, usize), fine: (usize, usize) },
    #[error("weight gamma={0} lies on the borderline set")]
    BorderlineWeight(f64),
    #[error("singular linear system at pivot {0}")]
    SingularSystem(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
