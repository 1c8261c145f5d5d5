//! Primitive numeric layers, each a pure forward function with an explicit backward.

pub mod conv;
pub mod dense;
pub mod fft;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use dense::{linear, linear_backward, relu, relu_backward, softmax_cross_entropy};
pub use fft::{fft2, ifft2};
pub use norm::{batch_norm, batch_norm_backward, Mode, RunningStats};
pub use pool::{avg_pool, avg_pool_backward, global_avg_pool, max_pool, max_pool_backward, Pool2d};
