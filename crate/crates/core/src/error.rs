use thiserror::Error;

/// Errors raised by the numerical modules.
///
/// Each variant corresponds to one failure mode of a contract; the CLI maps
/// them onto exit codes through [`Error::exit_code`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} lies outside the chart: {reason}")]
    OutOfChart { point: Vec<f64>, reason: String },
    #[error("metric is not positive definite at {point:?}")]
    SingularMetric { point: Vec<f64> },
    #[error("adaptive quadrature did not reach tolerance {tol:e} (estimate {estimate:e})")]
    QuadratureFailure { tol: f64, estimate: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("integrator step underflow at s = {s}")]
    StepUnderflow { s: f64 },
    #[error("variational solution diverged (norm {norm:e})")]
    LinearizationDiverged { norm: f64 },
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("entry count {count} exceeds cap {cap}")]
    Overflow { count: usize, cap: usize },
    #[error("no eigenvalue passed the mesh error gate")]
    MeshTooCoarse,
    #[error("invalid profile: {0}")]
    ProfileInvalid(String),
    #[error("lambda {lambda} beyond complete cutoff {cutoff}")]
    BeyondCutoff { lambda: f64, cutoff: f64 },
    #[error("time grid step {dt} violates Nyquist bound {bound} for lambda up to {lambda_max}")]
    NyquistViolation { dt: f64, bound: f64, lambda_max: f64 },
    #[error("closed geodesic is degenerate: |det(I - dP)| = {det_factor:e}")]
    Degenerate { det_factor: f64 },
    #[error("length spectrum too crowded near L = {length}: nearest other length {nearest}")]
    CrowdedLengthSpectrum { length: f64, nearest: f64 },
    #[error("Schrodinger kernel undefined at t = 0")]
    ZeroTime,
    #[error("boundary leak: fraction {fraction:e} of mass near the box boundary")]
    BoundaryLeak { fraction: f64 },
    #[error("need at least {needed} dyadic shells, grid supports {available}")]
    InsufficientShells { needed: usize, available: usize },
    #[error("wavefront transport mismatch at probes {0:?}")]
    TransportMismatch(Vec<usize>),
    #[error("caustic reached at t = {t}, direction angle {angle}: {reason}")]
    CausticReached { t: f64, angle: f64, reason: String },
    #[error("Euclidean sanity gate failed: {0}")]
    SanityGateFailed(String),
    #[error("data band outside tabulated range: {0}")]
    BandOutOfRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported for this model: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfChart { .. } => "OutOfChart",
            Error::SingularMetric { .. } => "SingularMetric",
            Error::QuadratureFailure { .. } => "QuadratureFailure",
            Error::NonFinite(_) => "NonFinite",
            Error::StepUnderflow { .. } => "StepUnderflow",
            Error::LinearizationDiverged { .. } => "LinearizationDiverged",
            Error::Inconclusive(_) => "Inconclusive",
            Error::Overflow { .. } => "Overflow",
            Error::MeshTooCoarse => "MeshTooCoarse",
            Error::ProfileInvalid(_) => "ProfileInvalid",
            Error::BeyondCutoff { .. } => "BeyondCutoff",
            Error::NyquistViolation { .. } => "NyquistViolation",
            Error::Degenerate { .. } => "Degenerate",
            Error::CrowdedLengthSpectrum { .. } => "CrowdedLengthSpectrum",
            Error::ZeroTime => "ZeroTime",
            Error::BoundaryLeak { .. } => "BoundaryLeak",
            Error::InsufficientShells { .. } => "InsufficientShells",
            Error::TransportMismatch(_) => "TransportMismatch",
            Error::CausticReached { .. } => "CausticReached",
            Error::SanityGateFailed(_) => "SanityGateFailed",
            Error::BandOutOfRange(_) => "BandOutOfRange",
            Error::Config(_) => "Config",
            Error::Unsupported(_) => "Unsupported",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
