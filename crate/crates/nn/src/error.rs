use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: expected input {expected}, got {got}")]
    Shape {
        layer: &'static str,
        expected: String,
        got: String,
    },

    #[error("tensor dims {dims:?} need {expected} values, got {got}")]
    Size {
        dims: [usize; 4],
        expected: usize,
        got: usize,
    },

    #[error("{0}: backward called without a cached training forward pass")]
    NoCache(&'static str),

    #[error("missing state entry `{0}`")]
    MissingState(String),

    #[error("state entry `{name}` has {got} values, expected {expected}")]
    StateSize {
        name: String,
        expected: usize,
        got: usize,
    },
}
