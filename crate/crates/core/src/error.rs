use thiserror::Error;

/// Errors produced by the simulation, estimation and experiment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two objects that must share a shape (factor count, state dimension,
    /// sample count) do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A base path does not cover the grid of the scheme it is combined with.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// The scheme produced a non-finite state.
    #[error("scheme `{scheme}` exploded at step {step}: non-finite state")]
    Explosion { scheme: String, step: usize },

    /// A ratio or regression has a vanishing denominator.
    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    /// Empty input where at least one sample is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// Configuration errors, aggregated.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
