use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("SNR is undefined for an all-zero power allocation")]
    UndefinedSnr,

    #[error("Fisher information is singular along {direction} (condition {condition:.3e})")]
    SingularFisher { direction: String, condition: f64 },

    #[error("parameter unidentifiable under this allocation: {0}")]
    Unidentifiable(String),

    #[error("power allocation infeasible: {0}")]
    Infeasible(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("estimator failed: {0}")]
    Estimation(String),

    #[error("range unobservable: carrier set has {0} subcarrier(s), need at least 2")]
    RangeUnobservable(usize),

    #[error(
        "MUSIC resolved {found} peak(s) but {wanted} were requested (peaks at {peaks_deg:?} deg)"
    )]
    UnresolvedPeaks {
        wanted: usize,
        found: usize,
        peaks_deg: Vec<f64>,
    },

    #[error("ill-conditioned projection: steering matrix condition {0:.3e}")]
    IllConditionedProjection(f64),

    #[error("search grid {0}")]
    GridOutOfRange(String),

    #[error("estimator failure budget exceeded: {failures} of {trials} trials failed")]
    FailureBudget { failures: usize, trials: usize },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
