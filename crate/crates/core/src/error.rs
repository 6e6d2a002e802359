use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("element {element} displaced by {displacement} exceeds the deformation bound {bound}")]
    DeformationBound {
        element: usize,
        displacement: f64,
        bound: f64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid unfolding mode {0}, expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("singular value decomposition did not converge")]
    NoConvergence,

    #[error("reference has zero norm")]
    ZeroReference,

    #[error("failed to parse {key}: {message}")]
    Parse { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
