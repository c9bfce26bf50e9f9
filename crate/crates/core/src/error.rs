use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batch norm in train mode needs at least 2 values per channel, got {got}")]
    DegenerateBatch { got: usize },

    #[error("backward requires a scalar loss, got a tensor with {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("fcm needs at least {wanted} distinct values, found {found}; inspect the difference image")]
    TooFewDistinctValues { wanted: usize, found: usize },

    #[error(
        "{class} is empty after preclassification; inspect the difference image \
         (the scenes may be identical or the change signal too weak)"
    )]
    EmptyClass { class: &'static str },

    #[error("preclassification is degenerate: changed cluster holds {got} pixels, cap is {cap}")]
    DegeneratePreclass { got: usize, cap: usize },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
