use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A point lies outside the domain of a chart or map.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Problem reading a CSV source. `row` is 1-based and counts the header
    /// as row 1; 0 means the problem is not tied to a single row.
    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    #[error("rank-deficient predictor covariance (smallest/largest eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("degenerate information: {0}")]
    DegenerateInformation(String),

    #[error(
        "restricted information matrix is singular (condition number {condition:e}); \
         try a larger sample or a different bandwidth"
    )]
    SingularInformation { condition: f64 },

    #[error("maximum likelihood did not converge after {iterations} iterations (projected gradient norm {gradient_norm:e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{failed} of {total} replications failed for estimator {estimator} at n = {n}")]
    TooManyFailures {
        estimator: String,
        n: usize,
        failed: usize,
        total: usize,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage {
            stage,
            source: Box::new(e),
        }
    }

    /// Innermost error, with all pipeline-stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for problems with the caller's input (files, formats, configs)
    /// as opposed to numerical failures during estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Ingest { .. } | Error::Config(_) | Error::Io(_)
        )
    }
}
