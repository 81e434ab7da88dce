use thiserror::Error;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("gaussian cloud is empty")]
    EmptyCloud,
    #[error("invalid gaussian cloud: {0}")]
    InvalidCloud(&'static str),
    #[error("data range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
}
