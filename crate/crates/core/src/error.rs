use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Range(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("system is uncontrollable: controllability matrix is rank deficient at t = {t} for every window length up to {max_window}")]
    Uncontrollable { t: usize, max_window: usize },

    #[error(
        "controllability matrix M({t}, {p}) is row-rank deficient (sigma_min = {sigma_min:e})"
    )]
    Rank { t: usize, p: usize, sigma_min: f64 },

    #[error(
        "terminal state unreachable: horizon {p} is shorter than the controllability index {d}"
    )]
    Reachability { p: usize, d: usize },

    #[error("Newton solve did not converge after {iterations} iterations (gradient residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("controller failed at t = {t}: {source}")]
    Controller {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, t: usize) -> Error {
        Error::Controller {
            t,
            source: Box::new(self),
        }
    }

    /// Unwraps controller context down to the originating error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Controller { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by the caller's inputs rather than a numerical failure.
    pub fn is_rejection(&self) -> bool {
        matches!(
            self.root(),
            Error::Range(_)
                | Error::Validation(_)
                | Error::Configuration(_)
                | Error::Precondition(_)
                | Error::Reachability { .. }
                | Error::Degenerate(_)
                | Error::Uncontrollable { .. }
                | Error::Json(_)
        )
    }
}
