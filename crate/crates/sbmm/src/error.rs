use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    Arg(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{what} did not converge within {iters} iterations")]
    NoConvergence { what: &'static str, iters: usize },
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dim(format!("{what}: got {got}, expected {want}")));
    }
    Ok(())
}
