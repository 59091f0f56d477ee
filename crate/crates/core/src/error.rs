use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    /// `row` is the 1-based data row (the header is not counted).
    #[error("cannot parse value at row {row}, column `{col}`")]
    ParseFailure { row: usize, col: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("no units left after trimming the exposure")]
    EmptyAfterTrim,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("exposure model has zero residual variance")]
    DegenerateResidual,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample has no spread")]
    DegenerateSample,
    #[error("generalized propensity score is not representable")]
    GpsUnderflow,

    #[error("caliper too large: no exposure bins fit in the range")]
    CaliperTooLarge,
    #[error("no exposure bin contains any observed unit")]
    NoCandidatesAnywhere,
    #[error("exposure column has zero variance")]
    DegenerateExposure,

    #[error("total weight is zero")]
    ZeroTotalWeight,
    #[error("no matched unit within the caliper window around w = {w}")]
    EmptyWindow { w: f64 },
    #[error("every bandwidth candidate produced a degenerate fit")]
    AllCandidatesDegenerate,

    #[error("caliper window around w = {w} holds {found} units, need at least {needed}")]
    InsufficientNeighbors { w: f64, found: usize, needed: usize },
    #[error("outcome density at the quantile is below the floor (w = {w}, tau = {tau}, density = {density:e})")]
    DensityFloorHit { w: f64, tau: f64, density: f64 },
    #[error("{failed} of {total} bootstrap replicates failed")]
    ReplicateFailures { failed: usize, total: usize },
    #[error("{dropped} of {total} benchmark replications dropped")]
    TooManyDroppedReps { dropped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that come from numerical degeneracy rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficientDesign
                | Error::DegenerateResidual
                | Error::DegenerateSample
                | Error::GpsUnderflow
                | Error::CaliperTooLarge
                | Error::NoCandidatesAnywhere
                | Error::DegenerateExposure
                | Error::ZeroTotalWeight
                | Error::EmptyWindow { .. }
                | Error::AllCandidatesDegenerate
                | Error::InsufficientNeighbors { .. }
                | Error::DensityFloorHit { .. }
        )
    }
}
