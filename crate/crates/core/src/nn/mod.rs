//! Layer primitives with hand-written forward and backward passes.
//!
//! All math runs in f64. Every op is a pure function: forward passes return
//! whatever the matching backward pass needs as an explicit cache, and batch
//! norm returns its running-statistic updates instead of applying them, so
//! callers decide when state changes.

mod conv;
mod layers;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_output_shape};
pub use layers::{
    bn_backward, bn_forward_eval, bn_forward_train, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    BnCache,
};
