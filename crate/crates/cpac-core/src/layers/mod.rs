//! Layer implementations: the factorized convolution layer, a dense
//! reference convolution, the fully connected output layer, and the
//! softmax cross-entropy loss.
//!
//! Every layer exposes a pure `*_forward` that returns its cache by value
//! (safe to run on shared state from many threads) plus a stateful wrapper
//! that stores the cache between one forward and its matching backward and
//! rejects out-of-order use.

mod cpac;
mod dense;
mod fc;
mod loss;

pub use cpac::{
    cpac_apply, cpac_backward, cpac_backward_naive, cpac_forward, grad_kn_matrix,
    grad_ks_matrix, grad_kx_matrix, grad_ky_matrix, CpacCache, CpacGradients, CpacLayerState,
    RankCache,
};
pub use dense::{conv_forward_reference, dense_conv_backward, dense_conv_forward, DenseConvLayer};
pub use fc::{fc_backward, fc_forward, FcGradients, FcLayerState};
pub use loss::{softmax, softmax_xent, LossRecord};
