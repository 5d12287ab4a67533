use thiserror::Error;

pub type Result<T> = std::result::Result<T, DoaError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoaError {
    #[error("angle {0} rad is outside [-pi/2, pi/2]")]
    AngleOutOfRange(f64),

    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("source covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("signal eigenvalue gap {gap:e} above noise power is too small to identify the signal subspace")]
    DegenerateSignalSubspace { gap: f64 },

    #[error("snapshot set is empty")]
    EmptySnapshots,

    #[error("matrix is not Hermitian (residual {residual:e})")]
    NotHermitian { residual: f64 },

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error(
        "Hermitian eigensolver did not converge on a {dimension}x{dimension} matrix \
         (frobenius norm {frobenius_norm:e}, hermitian residual {hermitian_residual:e})"
    )]
    EigenSolver {
        dimension: usize,
        frobenius_norm: f64,
        hermitian_residual: f64,
    },

    #[error("basis columns are not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    #[error("polynomial leading coefficient vanishes (|c_n| = {leading:e}, max |c| = {max:e})")]
    VanishingLeadingCoefficient { leading: f64, max: f64 },

    #[error("companion QR iteration failed to converge for degree {degree}")]
    RootFinder { degree: usize },

    #[error("root pairing failed: worst reciprocal mismatch {mismatch:e}")]
    RootPairing { mismatch: f64 },

    #[error("steering matrix is ill-conditioned (condition number estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("reliability factor {0} is outside [0, 1]")]
    GammaOutOfRange(f64),

    #[error("gamma grid is invalid: {0}")]
    InvalidGammaGrid(String),

    #[error("infeasible root pre-selection p={p}, q={q} for M={m}, K={k}")]
    InfeasiblePlan { m: usize, k: usize, p: usize, q: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank mismatch: expected rank {expected}, projector trace {trace}")]
    RankMismatch { expected: usize, trace: f64 },

    #[error("every candidate failed: {0}")]
    AllCandidatesFailed(String),

    #[error("Fisher information matrix is singular")]
    SingularInformation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
