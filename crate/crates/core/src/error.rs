use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular affine transform for camera {camera}")]
    SingularTransform { camera: usize },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("time regression: step at {got} after {last}")]
    TimeRegression { last: u32, got: u32 },
    #[error("detection out of scene bounds: {0}")]
    OutOfBounds(String),
    #[error("dangling trajectory reference {0}")]
    DanglingTrajectory(u64),
    #[error("empty feature history")]
    EmptyHistory,
    #[error("empty training data: {0}")]
    EmptyData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
