//! Minimal reverse-mode automatic differentiation for small GAP-headed CNNs.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! output [`Tensor`]. [`Graph::backward`] walks the nodes in reverse and fills
//! the `grad` buffer of every node that (transitively) depends on a leaf created
//! with `requires_grad = true`.

mod adam;
mod checkpoint;
mod conv;
mod graph;
mod network;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointManifest,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use graph::{gaussian_kernel, Graph, Var};
pub(crate) use graph::{reflect101 as reflect101_index, upsample_planes};
pub use network::{LayerSpec, NetVars, Network, Param, Pass};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch at layer {index} ({layer}): {detail}")]
    LayerShape {
        index: usize,
        layer: String,
        detail: String,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("backward requested before any forward pass produced {0:?}")]
    NoForwardPass(Var),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
