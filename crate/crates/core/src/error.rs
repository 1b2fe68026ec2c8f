use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("subject {subject} has no event {k}")]
    MissingEvent { subject: String, k: u32 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("distance pool is empty")]
    EmptyPool,

    #[error("covariate `{name}` cannot be resolved for subject {subject}")]
    UnresolvableCovariate { name: String, subject: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no treated unit in the stratum can be matched")]
    InfeasibleStratum,

    #[error("problem too large for exhaustive evaluation: {0}")]
    TooLarge(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("outcome `{outcome}` missing for subject {subject}")]
    MissingOutcome { outcome: String, subject: String },

    #[error("design contains no matched sets")]
    EmptyDesign,

    #[error("estimating function has no sign change on [{lo}, {hi}] ({what})")]
    BracketFailure { what: String, lo: f64, hi: f64 },

    #[error("dose is unaffected by treatment: no root for the proportional effect ({0})")]
    ZeroDoseEffect(String),

    #[error("balance invariant violated: {0}")]
    BalanceViolation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
