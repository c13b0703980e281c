//! Convolutional networks in the CNN-F / CNN-M / CNN-S family.
//!
//! Networks are described by an [`ArchitectureSpec`] (five convolutional and
//! three fully-connected layers, with ReLU, local response normalisation,
//! max pooling and dropout in between) and executed on the CPU with im2col
//! and a blocked matrix product. Training uses mini-batch SGD with momentum
//! and weight decay. Full-size networks can be built and shape-checked;
//! reduced-width variants on small inputs are what actually gets trained.

mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod scalar;
pub mod spec;
pub mod train;

pub use error::{Error, Result};
pub use layers::{LayerParams, Mode};
pub use loss::LossKind;
pub use network::{init_network, Gradients, NetworkState, Tensor};
pub use scalar::Scalar;
pub use spec::{
    build_architecture, build_with, output_shape, ArchName, ArchitectureSpec, BuildOptions, DropoutMode,
    LayerKind, LayerSpec, LrnParams, TensorShape,
};
pub use train::{extract_features, fine_tune, sgd_step, train, LrSchedule, SampleSource, SgdHyper, TrainConfig};
