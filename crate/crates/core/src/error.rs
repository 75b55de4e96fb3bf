use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("zone {from} cannot reach zone {to}")]
    Unreachable { from: u64, to: u64 },
    #[error("{what} exceeds guard: {size} > {limit}")]
    Guard {
        what: &'static str,
        size: f64,
        limit: f64,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dual ascent diverged: objective fell for {0} consecutive iterations; use a smaller step size")]
    Divergence(usize),
    #[error("auction: {0}")]
    Auction(String),
    #[error("integrality violated: residual {residual:e} in {context}")]
    Integrality { residual: f64, context: String },
    #[error(transparent)]
    Lp(#[from] csd_lp::LpError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
