use thiserror::Error;

/// Errors surfaced by manifold primitives, losses, diagnostics and solvers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum ObncError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("infeasible dimensions: need d >= K, got d = {d}, K = {k}")]
    InfeasibleDimensions { d: usize, k: usize },

    #[error("degenerate retraction: column {col} of X + tV has norm {norm:.3e}")]
    DegenerateRetraction { col: usize, norm: f64 },

    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("direction is not tangent: max column violation {violation:.3e}")]
    NotTangent { violation: f64 },

    #[error("diagnostic unsupported for this loss: {0}")]
    UnsupportedDiagnostic(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("wrong saddle case: {0}")]
    WrongCase(String),

    #[error("no escape direction: {0}")]
    NoEscape(String),

    #[error("landscape hypothesis violated: tau = {tau} >= bound {bound}; curvature sign not guaranteed (got {hess_value:.6e})")]
    HypothesisViolated {
        tau: f64,
        bound: f64,
        hess_value: f64,
    },

    #[error("line search failed to bracket a decrease after {expansions} expansions")]
    StepFailure { expansions: usize },

    #[error("divergence detected at iteration {iter}: f = {f:.6e} exceeds 10x initial {f0:.6e}")]
    Divergence { iter: usize, f: f64, f0: f64 },

    #[error("internal consistency failure: {0}")]
    InternalConsistency(String),
}

pub type Result<T> = std::result::Result<T, ObncError>;
