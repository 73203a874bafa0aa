use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is outside the domain of {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("degree precondition violated: expected degree {expected}, measured {measured:.6}")]
    DegreeMismatch { expected: i64, measured: f64 },

    #[error("no antipodal coincidence found (best mismatch {best_mismatch:.3e}); the map may have odd degree or the grid is too coarse")]
    NoAntipodalPair { best_mismatch: f64 },

    #[error("regular-value degree failed: {0}")]
    NotRegular(String),

    #[error("construction rejected: {0}")]
    Construction(String),

    #[error("fiber sample invalid: {skipped} of {total} tetrahedra degenerate")]
    IrregularFiber { skipped: usize, total: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }
}
