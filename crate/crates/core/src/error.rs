use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{function}: argument {value} outside the domain ({expected})")]
    Domain {
        function: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("invalid configuration: field `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("invalid coefficients: {0}")]
    Coefficients(String),

    #[error("coefficient table is empty")]
    EmptyTable,

    #[error("user index {index} out of range for {m} users")]
    UserIndex { index: usize, m: usize },

    #[error("quartic has no positive real root (lambda = {lambdas:?})")]
    NoPositiveRoot { lambdas: [f64; 4] },

    #[error(
        "multiplier bisection could not bracket the budget: target {target}, \
         sum at tau_lo={tau_lo:e} is {sum_lo}, at tau_hi={tau_hi:e} is {sum_hi}"
    )]
    Bracket {
        target: f64,
        tau_lo: f64,
        sum_lo: f64,
        tau_hi: f64,
        sum_hi: f64,
    },

    #[error("{scheme} exceeded {limit} outer iterations")]
    IterationCap { scheme: &'static str, limit: usize },

    #[error("grid oracle supports at most 3 users, got {0}")]
    TooManyUsers(usize),

    #[error("invalid sweep spec: {0}")]
    Spec(String),

    #[error("{failed} of {total} trials failed, above the 1% tolerance")]
    TooManyFailures { failed: usize, total: usize },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
