use thiserror::Error;

/// Errors produced anywhere in the homogenization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{what} = {value} is not a multiple of the fine cell width {h}")]
    NonCommensurate { what: String, value: f64, h: f64 },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("operator support is empty")]
    EmptySupport,

    #[error("functions live on incompatible grids ({0} vs {1} cells per side)")]
    IncompatibleGrid(usize, usize),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e}, tolerance {tol:.1e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("constraint row {row} ({label}) is linearly dependent on the preceding rows")]
    RankDeficient { row: usize, label: String },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("continuum {continuum} has no nonempty subcell in the patch of cell {cell}")]
    EmptyContinuum { cell: usize, continuum: usize },

    #[error("missing data: {0}")]
    Missing(String),

    #[error("singular macro system: smallest eigenvalue {min_eig:.3e} vs largest {max_eig:.3e}")]
    SingularSystem { min_eig: f64, max_eig: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
