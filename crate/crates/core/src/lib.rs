//! Pixelwise vessel segmentation with factorized multi-scale feature extraction.
//!
//! The pipeline is:
//!
//! 1. [`fext`]: a stack of multi-scale layers. Each layer runs one factorized
//!    convolution chain per scale (3, 5, 7, 9, 11 in the `fext5-100` preset) and
//!    concatenates the results. No pooling and no downsampling; every convolution is
//!    zero-padded to keep the spatial size.
//! 2. The outputs of every layer plus the input image form a 100-feature vector
//!    per pixel, which [`head`] reshapes into a 10×10 mesh and classifies with a
//!    small three-layer CNN.
//! 3. [`train`] optimizes both end to end through the reverse-mode engine in
//!    [`autograd`]; [`metrics`] scores probability maps; [`imaging`] handles
//!    datasets, skeletonization and checkpoints.
//!
//! All tensors are `f32` in `(N, C, H, W)` order. Convolution reductions
//! accumulate in `f64`, and every output element is computed by exactly one
//! task, so results are bit-identical at any worker thread count.

pub mod autograd;
pub mod error;
pub mod evaluate;
pub mod fext;
pub mod head;
pub mod imaging;
pub mod map;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, NodeId, ParamId, ParamStore};
pub use error::{Error, Result};
pub use fext::{
    build_fext_layer, build_fext_network, export_feature_maps, factorize, receptive_field, Activation, FextLayer,
    FextLayerSpec, FextNetwork, FextNetworkSpec, MiniNetwork, ScaleSpec, StageSpec, PRESET_FEXT5_100,
};
pub use head::{build_mesh_head, MeshHead, MeshHeadSpec};
pub use map::{BinaryMap, Map, RealMap};
pub use metrics::{ConfusionCounts, ImageScores, MetricsReport};
pub use model::{Model, ModelSpec, Normalization, Task};
pub use ops::{concat_channels, conv2d_same, relu, softmax_cross_entropy, ConvKernel};
pub use tensor::{Shape, Tensor};
pub use train::{TrainConfig, TrainState, Trainer};
