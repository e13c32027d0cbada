use crate::dist::Link;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("value {value} outside the domain of {what}")]
    Domain { what: String, value: f64 },

    #[error("link {link:?} undefined at {value}")]
    LinkDomain { link: Link, value: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("bad input format: {0}")]
    Format(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("empty cluster")]
    EmptyCluster,

    #[error("coordinate descent did not converge after {sweeps} sweeps")]
    LassoNoConvergence { sweeps: usize, best: Vec<f64> },

    #[error("missing forecast keys: {0:?}")]
    MissingKeys(Vec<String>),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(what: impl Into<String>, value: f64) -> Self {
        Error::Domain { what: what.into(), value }
    }
}
