use std::path::PathBuf;

use thiserror::Error;

/// Errors shared across the whole engine.
#[derive(Debug, Error)]
pub enum AtlasError {
    /// Structural geometry defect, located down to the ring and vertex.
    #[error("invalid geometry in region '{region}': ring {ring}, vertex {vertex}: {reason}")]
    InvalidGeometry {
        region: String,
        ring: usize,
        vertex: usize,
        reason: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A source region carries mass that cannot be disaggregated.
    #[error("region '{region}' has total {total} but no assigned population to carry it")]
    ZeroPopulationRegion { region: String, total: f64 },

    #[error("point ids mismatch between allocation and assignment; missing: {missing:?}")]
    IdMismatch { missing: Vec<String> },

    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("clustered covariance requires at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("singular matrix while computing {0}")]
    Singular(String),

    /// Newton iteration on the moment vector did not reach tolerance. Carries
    /// the per-iteration moment norms for diagnosis.
    #[error("no convergence after {iterations} iterations; final moment norm {final_norm:e}")]
    NonConvergence {
        iterations: usize,
        final_norm: f64,
        trajectory: Vec<f64>,
    },

    #[error("exponent {value} outside overflow-safe range |x| <= {limit}")]
    Overflow { value: f64, limit: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// A bid-rent indifference equation has no solution in the search range.
    #[error("no root in range: {0}")]
    NoRoot(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl AtlasError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AtlasError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AtlasError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AtlasError>;
