//! Stimulus preparation and training-data handling.

mod augment;
mod dataset;
mod image;
mod label;
mod mask;
pub mod synthetic;

pub use self::augment::{affine, augment, flip_horizontal, AugmentationConfig};
pub use self::dataset::{
    load_dataset, undersample_pair, write_dataset, ManifestRecord, StimulusImage, MANIFEST_FILE,
};
pub use self::image::{blurred_grayscale, box_blur, images_to_batch, to_grayscale, Image};
pub use self::label::ExpressionLabel;
pub use self::mask::{
    composite_with, reveal_composite, shift_mask_8dirs, BinaryMask, ClickMask, NEIGHBOR_OFFSETS,
};
pub use self::synthetic::generate_synthetic_dataset;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StimuliError {
    #[error("unknown expression label {0:?}")]
    UnknownLabel(String),
    #[error("true and false label are both {0}")]
    SameLabels(ExpressionLabel),
    #[error("no items of class {0}")]
    MissingClass(ExpressionLabel),
    #[error("click ({x},{y}) outside {width}x{height} image")]
    ClickOutOfBounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("blur kernel {k} too large for {width}x{height} image")]
    BlurKernel {
        k: usize,
        width: usize,
        height: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Image(#[from] ::image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
