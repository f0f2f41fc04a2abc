//! Two-class encoder-decoder segmentation (EFCN-8 and ESegNet variants)
//! with Monte Carlo dropout uncertainty and guided-backpropagation saliency,
//! built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use rng::Rng;
pub use tensor::{he_normal_init, Element, IntTensor, Tensor};
