use thiserror::Error;

pub type Result<T, E = SvphError> = std::result::Result<T, E>;

/// Errors raised by the numerical routines.
///
/// Report-style operations never return these for "the assumption fails";
/// they are reserved for inputs the algorithms cannot process and for
/// numerical diagnostics that invalidate the result.
#[derive(Debug, Error)]
pub enum SvphError {
    #[error("invalid map specification: {0}")]
    InvalidSpec(String),

    #[error("invalid observable: {0}")]
    InvalidObservable(String),

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("non-positive Jacobian determinant {det:e} at ({x}, {theta})")]
    NonPositiveDeterminant { x: f64, theta: f64, det: f64 },

    #[error("preimage search found {found} roots, expected {expected} (seed grid {seeds})")]
    RootCountMismatch {
        expected: usize,
        found: usize,
        seeds: usize,
    },

    #[error("unstable cone not invariant at ({x}, {theta}): slope ratio {ratio}")]
    ConeNotInvariant { x: f64, theta: f64, ratio: f64 },

    #[error("preimage enumeration budget exceeded: {required} > {budget}")]
    BudgetExceeded { required: f64, budget: f64 },

    #[error("aliasing suspected: doubling Q changed an entry by {max_change:e}")]
    AliasingSuspected { max_change: f64 },

    #[error("eigen solver diverged: {0}")]
    EigenSolverDiverged(String),

    #[error("branch matching failed at nu = {nu}: overlap {overlap}")]
    BranchMatchingFailed { nu: f64, overlap: f64 },

    #[error("decomposition inconsistent: spectral multiplicity {spectral}, orbit clusters {clusters}")]
    DecompositionInconsistent { spectral: usize, clusters: usize },

    #[error("density {index} has negativity {negativity:e} beyond clipping threshold")]
    DensityNegative { index: usize, negativity: f64 },

    #[error("weight cross-check failed for acip {index}: c_k = {weight}, basin mass = {basin_mass}")]
    WeightMismatch {
        index: usize,
        weight: f64,
        basin_mass: f64,
    },

    #[error("correlations do not decay geometrically (|c_5| = {c5:e}, |c_J| = {last:e})")]
    NonDecayingCorrelations { c5: f64, last: f64 },

    #[error("pipeline stage failed: {0}")]
    StageFailed(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SvphError {
    /// True for configuration problems, false for numerical-diagnostic failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SvphError::InvalidSpec(_)
                | SvphError::InvalidObservable(_)
                | SvphError::Validation(_)
                | SvphError::Precondition(_)
                | SvphError::Json(_)
                | SvphError::Io(_)
        )
    }
}
