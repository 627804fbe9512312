//! Dense matrices, a small MLP with hand-written backpropagation, softmax and
//! cross-entropy utilities, and SGD with momentum.

mod loss;
mod matrix;
mod mlp;
mod optim;

pub use loss::{
    argmax, cross_entropy, kl_divergence, log_softmax_t, soft_cross_entropy, softmax_t,
};
pub(crate) use loss::{check_labels, softmax_unchecked};
pub use matrix::Matrix;
pub use mlp::{
    backward, backward_with_latent, forward, Activation, Architecture, ForwardTrace, LayerSpan,
    Layout, MlpModel, ParamVector,
};
pub use optim::{sgd_step, Sgd, SgdState};

#[cfg(test)]
mod tests;
