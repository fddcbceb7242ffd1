//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("label row {image_id:?} has {ones} one-hot cells set (expected exactly 1)")]
    BadLabelRow { image_id: String, ones: usize },

    #[error("{} image files missing from corpus dir, first missing ids: {}",
            ids.len(), ids.iter().take(8).cloned().collect::<Vec<_>>().join(", "))]
    MissingImages { ids: Vec<String> },

    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),

    #[error("mask dimensions {mask_w}x{mask_h} do not match image {img_w}x{img_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        img_w: u32,
        img_h: u32,
    },

    #[error("gate bounds ({0}, {1}) invalid: min_frac must be < max_frac")]
    BadGateBounds(f64, f64),

    #[error("image {0} is smaller than the 8x8 minimum")]
    ImageTooSmall(String),

    #[error("segmentation model failure: {0}")]
    Model(String),

    #[error("missing segmented file for accepted image {image_id}: {path}")]
    MissingSegmented { image_id: String, path: PathBuf },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("checkpoint {path} is malformed: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("pretrained backbone weights not found at {0} (pass allow_random_init to train from a seeded random backbone)")]
    MissingWeights(PathBuf),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
