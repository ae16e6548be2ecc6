use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskDimMismatch(u32, u32, u32, u32),

    #[error("invalid score vector: {0}")]
    InvalidScores(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("nothing to cluster")]
    NothingToCluster,

    #[error("non-finite input at row {0}")]
    NonFinite(usize),

    #[error("covariance of component {0} is not positive definite after regularization")]
    NotPositiveDefinite(usize),

    #[error("cannot form {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },

    #[error("labels length {labels} does not match {detections} detections")]
    LabelCount { labels: usize, detections: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("no calibration records")]
    NoRecords,

    #[error("reliability diagram has no non-empty bin")]
    EmptyDiagram,

    #[error("true class probability is zero; focal loss is infinite")]
    InfiniteLoss,

    #[error("degenerate sample for density estimate: {0}")]
    DegenerateSample(&'static str),

    #[error("empty cluster")]
    EmptyCluster,

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
