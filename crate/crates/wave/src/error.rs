use thiserror::Error;

pub type Result<T> = std::result::Result<T, WaveError>;

#[derive(Debug, Clone, Error)]
pub enum WaveError {
    #[error("time step violates the CFL bound: ratio {ratio:.4} > 0.5")]
    CflViolation { ratio: f64 },
    #[error("non-finite value after step {step}")]
    NonFinite { step: usize },
    #[error("Picard iteration diverged (relative updates {history:?})")]
    PicardDiverged { history: Vec<f64> },
    #[error("support of source {later} meets the causal future of source {earlier}")]
    SupportOverlap { earlier: usize, later: usize },
    #[error("wavefronts do not meet in a single event (residual {residual:.3e})")]
    NoIntersection { residual: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid source: {0}")]
    InvalidSource(String),
    #[error("background is not of the static product form: {0}")]
    UnsupportedBackground(String),
    #[error("probe region depends on grid boundary data: {0}")]
    ProbeOutsideGrid(String),
    #[error("field file: {0}")]
    Format(String),
}

impl From<std::io::Error> for WaveError {
    fn from(e: std::io::Error) -> Self {
        WaveError::Format(e.to_string())
    }
}
