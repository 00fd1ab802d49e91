use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid grid, state or run configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Initial data is not resolved by the grid.
    #[error("resolution error: {0}")]
    Resolution(String),
    /// Mass reaches (or would reach) the edge of a box domain.
    #[error("truncation error: {0}")]
    Truncation(String),
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation was called at the wrong point in a time sequence.
    #[error("sequencing error: {0}")]
    Sequencing(String),
    /// NaN, blow-up or an integration step that left its accuracy envelope.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A transform or matrix failed an internal consistency check.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("misuse: {0}")]
    Misuse(String),
    /// The localization condition is undefined for this force field.
    #[error("degenerate force: {0}")]
    DegenerateForce(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Resolution(_)
                | Error::Domain(_)
                | Error::Misuse(_)
                | Error::DegenerateForce(_)
                | Error::Format(_)
        )
    }
}
