use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FddmError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupted payload: {0}")]
    Corrupt(String),
    #[error("checksum mismatch in {id}: {detail}")]
    Checksum { id: String, detail: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("unpaired cases: {0}")]
    Unpaired(String),
}

impl FddmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FddmError>;
