use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sampling disc is fully masked: no admissible point after {attempts} attempts")]
    DiscMasked { attempts: u64 },
    #[error("fetch failed with HTTP status {status:?} after {attempts} attempts: {message}")]
    Fetch { status: Option<u16>, attempts: u32, message: String },
    #[error("corrupt tile at {path}: {message}")]
    CorruptTile { path: PathBuf, message: String },
    #[error("tile missing from cache: {0}")]
    MissingTile(PathBuf),
    #[error("incomplete results: {0}")]
    IncompleteResults(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] urbanssl_nn::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
