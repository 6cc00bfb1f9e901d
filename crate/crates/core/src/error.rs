use thiserror::Error;

use crate::container::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("degenerate 6D rotation: the two column vectors are (nearly) parallel")]
    DegenerateRotation,
    #[error("degenerate point configuration: cross-covariance rank {rank} < 2")]
    DegenerateConfiguration { rank: usize },
    #[error("pose pool seed {0} also appears among the training seeds")]
    SeedOverlap(u64),
    #[error("joint {joint} of frame {frame} projects outside the image at ({x:.2}, {y:.2}) px")]
    OutOfFrame { frame: usize, joint: usize, x: f64, y: f64 },
    #[error("{op} needs at least {min} frames, got {got}")]
    TooShort { op: &'static str, min: usize, got: usize },
    #[error("sequence length {got} exceeds the encoder maximum of {max}")]
    LengthOverflow { got: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("{0}")]
    Variant(String),
    #[error("pose representation mismatch: {0}")]
    Representation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
