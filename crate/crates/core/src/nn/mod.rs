//! Tensors, a reverse-mode tape, layers and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{tile_rows, time_features, Init, Linear, Mlp, SelfAttention, LN_EPS};
pub use optim::{clip_grad_norm, Adam, LrSchedule};
pub use params::{Gradients, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
