use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, got {got})")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected} input, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("input value {value} at index {index} is outside [0, 1]")]
    InputRange { index: usize, value: f64 },
    #[error("backbone has trainable layers; adapter training requires it fully frozen")]
    BackboneNotFrozen,
    #[error("{0} is empty")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
