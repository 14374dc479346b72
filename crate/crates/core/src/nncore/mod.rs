//! Dense feedforward networks trained by backpropagation.
//!
//! Layer `l` maps `h_l -> phi_l(h_l W_l + b_l)` with `W_l` stored row-major
//! as `(fan_in, fan_out)`; the output layer has no activation. The same
//! forward/backward kernels serve the deterministic, dropout and variational
//! networks, which differ only in how they mask inputs or sample weights.

mod loss;
mod network;
mod optim;
mod spec;
mod train;

pub(crate) use loss::sigmoid;
pub use loss::{gaussian_nll, l2_penalty, loss_mae, loss_mse, softplus, Loss, SIGMA_FLOOR};
pub(crate) use network::{
    add_l2_gradient, backward_layers, check_input, flatten, forward_layers, forward_output, layer_slices_mut, Modifiers,
};
pub use network::{DenseLayer, ForwardCache, HeadOutput, Mask, Network};
pub use optim::{AdamConfig, AdamState};
pub use spec::{Activation, HeadKind, NetworkSpec};
pub use train::{
    fit, train, EarlyStopping, PlateauSchedule, StepContext, StopReason, TrainConfig, TrainHistory, Trainable,
    TrainingData,
};
