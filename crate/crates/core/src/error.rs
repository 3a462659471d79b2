use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("sensor {sensor} at {point:?} lies outside every element of part {part}")]
    Location {
        sensor: usize,
        part: usize,
        point: [f64; 3],
    },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("sparse factorization failed: zero pivot at row {row}")]
    Factorization { row: usize },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error(
        "dense sensitivity matrix needs {bytes} bytes, which could not be allocated; use the tensor-train method instead"
    )]
    Resource { bytes: usize },

    #[error("reduced system is singular even after the normal-equation fallback ({0})")]
    Regularization(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dense oracle limited to n_x <= {limit}, got {n}")]
    SizeGuard { n: usize, limit: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
