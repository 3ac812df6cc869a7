//! Electrode layouts, embedding stores, dataset manifests and splits, and
//! the synthetic generator used as a verification oracle.

mod layout;
mod manifest;
mod split;
mod store;
mod synthetic;

pub use layout::{Channel, ElectrodeLayout};
pub use manifest::{read_labels, write_labels, DatasetManifest};
pub use split::{split_windows, Split, Splits};
pub use store::{read_store, write_store, EmbeddingStore, STORE_MAGIC, STORE_VERSION};
pub use synthetic::{generate_synthetic, BlockSpec, LabelRule, SyntheticConfig, SyntheticDataset, Threshold};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
