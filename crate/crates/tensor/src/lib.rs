//! Small dense-tensor engine with reverse-mode autodiff, sized for desk-scale
//! 3D segmentation/classification networks on the CPU.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{softmax_axis, CustomOp, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::{Float, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}
