//! A small dense-tensor engine with reverse-mode gradients for the layer
//! kinds the policy network needs.

pub mod checkpoint;
mod gemm;
pub mod layers;
pub mod network;
pub mod optim;
pub mod shape;
pub mod tensor;

pub use layers::{LayerSpec, Mode};
pub use network::{summarize, LayerSummary, Network};
pub use optim::{clip_grad_norm, Adam};
pub use shape::{effective_window, output_size, param_count};
pub use tensor::{Param, Tensor};
