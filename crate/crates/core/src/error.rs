use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("tree {tree_id}: non-positive width {width} in year {year}")]
    NonPositiveWidth { tree_id: String, year: i32, width: f64 },
    #[error("tree {tree_id}: year gap, missing {missing:?}")]
    YearGap { tree_id: String, missing: Vec<i32> },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty stand")]
    EmptyStand,
    #[error("variable `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("unknown climate variable `{0}`")]
    UnknownVariable(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("sampler diverged: {0}")]
    Divergence(String),
    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
