//! The MNIST backbone, its feature taps, projection heads and checkpoints.

mod checkpoint;
mod cnn;
pub mod layers;
mod params;
mod projection;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use cnn::{
    build_mnist_cnn, Cnn, CnnArch, FeatureTap, ForwardCache, ModelHandle, BIAS, CONV1, CONV2, FC1, FC2, WEIGHT,
};
pub use params::{LayerGroup, ParameterTree, Schema};
pub use projection::{build_projection, ProjectionCache, ProjectionHead, Projector};

pub(crate) use cnn::argmax;
