//! Micro CNN engine: layers, networks, inference traces, gradients, training.

mod layer;
mod network;
mod train;

pub use layer::{conv2d, softmax, LayerKind, LayerParams, LayerSpec};
pub use network::{bundled_network, mnist_network, ForwardTrace, Network};
pub use train::{dataset_accuracy, train, EpochStats, Optimizer, TrainConfig};
