use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Invalid layer or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed or produced an out-of-range value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The power transform overflowed at the given flat coordinate.
    #[error("power transform saturated at index {index} (input {input})")]
    Saturation { index: usize, input: f64 },

    /// A gradient check saw a non-finite value.
    #[error("gradient check failed at coordinate {index}: analytic {analytic}, numeric {numeric}")]
    GradCheck {
        index: usize,
        analytic: f64,
        numeric: f64,
    },

    /// Mutual-information estimation could not proceed.
    #[error("estimation error: {0}")]
    Estimation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
