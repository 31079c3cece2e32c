use thiserror::Error;

/// Errors surfaced by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A tree address (edge id, leaf id, offset) does not exist or is out of range.
    #[error("structural error: {0}")]
    Structural(String),

    /// The operation is undefined on this input (e.g. single-leaf tree).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A quantity required to be positive vanished (e.g. zero root distance).
    #[error("singular input: {0}")]
    Singular(String),

    /// A quadrature or root-finding routine failed to reach its target.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Mark horizons were capped before every mass atom acquired a finite
    /// record time; grow the cap and retry.
    #[error("incomplete removal events: {0}")]
    Incomplete(String),
}

pub type Result<T> = std::result::Result<T, Error>;
