//! Forward/backward kernels for every layer and loss the network uses.
//!
//! These are pure functions over tensors: no tape, no parameters, no state.
//! The tape in [`crate::tape`] records which kernel produced which node and
//! replays the backward halves in reverse order.
//!
//! Layout conventions:
//! - convolutional tensors are `(batch, channels, length)`
//! - dense tensors are `(batch, features)`
//! - kernels are `(out_channels, in_channels, kernel_len)`

mod act;
mod conv;
mod dense;
mod loss;
mod norm;
mod pool;

pub use act::{selu_backward, selu_forward, sigmoid_backward, sigmoid_forward, softmax_backward, softmax_forward};
pub use conv::{
    conv1d_backward, conv1d_forward, conv1d_out_len, receptive_field, tconv1d_backward,
    tconv1d_forward, tconv1d_out_len, PadMode,
};
pub use dense::{dense_backward, dense_forward};
pub use loss::{
    cross_entropy_backward, cross_entropy_forward, mse_backward, mse_forward, PROB_FLOOR,
};
pub use norm::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, BatchNormCache, BN_EPSILON,
    BN_MOMENTUM,
};
pub use pool::{avg_pool1d_backward, avg_pool1d_forward, avg_pool1d_out_len};

#[cfg(test)]
pub(crate) fn assert_close(got: f64, want: f64, tol: f64) {
    assert!(
        (got - want).abs() <= tol,
        "got {got}, want {want} (tol {tol})"
    );
}
