use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("degenerate design: column `{0}` is constant")]
    DegenerateDesign(String),

    #[error("knot placement failed: {0}")]
    KnotPlacement(String),

    #[error("unknown term: {0}")]
    Lookup(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("logistic fit failed (separation): {0}")]
    Separation(String),

    #[error("unsupported covariance flavor: {0}")]
    UnsupportedFlavor(String),

    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("signed effect size is undefined for m1 = {0} (requires m1 = 1)")]
    SignedUndefined(usize),

    #[error("insufficient residual degrees of freedom: n = {n}, m = {m}")]
    InsufficientDf { n: usize, m: usize },

    #[error("effect size {0:e} is at the boundary; gradient undefined")]
    BoundaryGradient(f64),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("bootstrap unstable: {failures} failed refits for {replicates} replicates")]
    BootstrapInstability { failures: usize, replicates: usize },

    #[error("root finding failed: {0}")]
    Solver(String),

    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Prefixes the message with a term name, keeping the variant.
    pub fn in_term(self, term: &str) -> Error {
        match self {
            Error::SingularSystem(m) => Error::SingularSystem(format!("{term}: {m}")),
            Error::Separation(m) => Error::Separation(format!("{term}: {m}")),
            Error::IllConditioned(m) => Error::IllConditioned(format!("{term}: {m}")),
            other => other,
        }
    }
}
