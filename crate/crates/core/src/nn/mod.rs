//! Minimal f64 convolutional network stack with explicit backward passes.
//! No external ML framework; dense math goes through `ndarray`'s matmul.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod ops;
pub mod optim;

pub use model::{ClassifierNet, ForwardCache, NetConfig};
pub use optim::SgdMomentum;
