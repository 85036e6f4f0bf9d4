//! Dense tensors, reverse-mode autodiff, toy encoders/heads and optimization.

mod graph;
pub mod models;
pub mod optim;
pub mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use models::{
    DepthHead, DepthHeadConfig, EncoderConfig2D, EncoderConfig3D, ImageEncoder, PointEncoder, PointEncoding, Voxelization,
};
pub use optim::{cosine_lr, sgd_step, Sgd};
pub use params::{Bound, ParamStore};
pub use tensor::Tensor;
