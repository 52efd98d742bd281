//! Differentiable primitives over NCHW tensors.
//!
//! Every operation is a pure function of its inputs; backward functions take
//! whatever the forward pass produced (inputs, outputs or a cache) explicitly.

pub mod activation;
pub mod conv;
pub mod layout;
pub mod norm;
pub mod pool;
pub mod reference;

pub use activation::{relu, relu_backward, relu_backward_guided, softmax, softmax_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use layout::{concat_channels, linear, linear_backward, split_channels};
pub use norm::{batchnorm, batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState, BatchStats, Mode};
pub use pool::{global_avg_pool, global_avg_pool_backward, pool2x2, pool2x2_backward, PoolKind};
