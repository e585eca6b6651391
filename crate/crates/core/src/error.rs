use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error)]
pub enum LabError {
    /// A parameter lies outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested defect leaves no variational solution (p·q_ε ≤ 1).
    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("integration failed near r = {radius:e}: {reason}")]
    Integration { radius: f64, reason: String },

    #[error("could not bracket the shooting parameter in [{lo:e}, {hi:e}]: {reason}")]
    Bracketing { lo: f64, hi: f64, reason: String },

    #[error("tail constant did not settle: relative drift {drift:e} exceeds {limit:e}")]
    TailExtraction { drift: f64, limit: f64 },

    #[error("singular evaluation: {0}")]
    Singularity(String),

    #[error("regime error: {0}")]
    Regime(String),

    #[error("insufficient resolution: {0}")]
    Resolution(String),

    #[error("extrapolation did not converge: {0}")]
    Extraction(String),

    #[error("quadrature error estimate {estimate:e} exceeds tolerance {tolerance:e}")]
    Accuracy { estimate: f64, tolerance: f64 },

    #[error("continuation failed at eps = {eps:e}: {reason}")]
    ContinuationFailure { eps: f64, reason: String },

    #[error("iterate left the positive cone at eps = {eps:e}")]
    Branch { eps: f64 },

    #[error("composition error: {0}")]
    Composition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parameter window violated: {0}")]
    Window(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
