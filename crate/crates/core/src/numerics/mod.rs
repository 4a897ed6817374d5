//! Dense tensors, a reverse-mode tape, elementary layers, losses and Adam.

mod adam;
mod finite_diff;
mod layers;
pub mod loss;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, finite_diff_params, relative_error};
pub use layers::{batchnorm_forward, glorot, normal_init, BatchNorm, BatchNormState, Linear, Mlp, Mode};
pub use loss::{bce_loss, sigmoid};
pub use scalar::Scalar;
pub use tape::{Grads, Moments, NodeId, Param, ParamId, ParamRole, ParamStore, Tape};
pub use tensor::{linear_forward, sq_dist, sq_norm, Tensor2};
