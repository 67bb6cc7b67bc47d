//! Minimal neural-network toolkit: NHWC tensors, 3×3 convolutions,
//! fully connected layers, a layer graph with reverse-mode gradients, Adam,
//! and a checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{arch_digest, Checkpoint};
pub use layers::{ConvSpec, LayerSpec, Padding};
pub use network::{Network, NetworkBuilder, Source, Trace};
pub use params::{ParamEntry, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
