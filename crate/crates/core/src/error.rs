use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("horizon {0} outside the supported range 1..={max}", max = crate::sequences::MAX_HORIZON)]
    BoundedHorizon(usize),

    #[error("period index {index} outside 1..={horizon}")]
    Index { index: usize, horizon: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid design: {0}")]
    Design(String),

    #[error("sequence {0} has no observed units")]
    MissingSequence(String),

    #[error("cannot estimate the covariance of sequence {sequence}: {units} unit(s), need at least 2")]
    DegenerateCovariance { sequence: String, units: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("not identifiable: X'X + C'C has rank {rank} < {dim}")]
    NotIdentifiable { rank: usize, dim: usize },

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("enumeration would produce {count} assignments (limit {limit})")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("invalid parameter: {0}")]
    Parameter(String),
}
