//! Reverse-mode autodiff over dense feed-forward networks.

mod checkpoint;
mod fit;
mod mat;
mod net;
mod optim;
mod tape;

pub use checkpoint::Checkpoint;
pub use fit::{fit_mse, mse, DivergenceGuard, FitConfig, DIVERGENCE_LOSS, DIVERGENCE_PATIENCE};
pub use mat::Mat;
pub use net::{Activation, LayerSpec, NetworkParams, Topology};
pub use optim::{
    adam_step, clip_grad_norm, ema_update, finite_diff_check, AdamConfig, OptimizerState,
};
pub use tape::{Gradients, NodeId, SourceId, Tape};

/// Eager forward pass. [`Tape::mlp`] is the recording counterpart and
/// produces bit-identical values.
pub fn mlp_forward(params: &NetworkParams, input: &Mat, condition: &Mat) -> crate::Result<Mat> {
    params.forward(input, condition)
}
