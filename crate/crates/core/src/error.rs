use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("insufficient points: have {have}, need more than {need}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("visible point set is empty")]
    EmptyVisibleSet,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("target feature grid is empty")]
    EmptyTarget,
    #[error("view set is empty")]
    EmptyViewSet,
    #[error("correspondence mismatch: {0} vs {1} points")]
    Correspondence(usize, usize),
    #[error("time {0} outside [0, 1]")]
    InvalidTime(f64),
    #[error("integration needs at least one step, got {0}")]
    InvalidSteps(usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cardinality mismatch: {0} vs {1} points")]
    Cardinality(usize, usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: non-finite `{term}` loss at epoch {epoch}")]
    Diverged { term: String, epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
