//! Functional layer primitives and their backward kernels.
//!
//! Everything here is a pure function of its arguments; the autodiff graph
//! in [`crate::graph`] records calls to these kernels.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod spatial;

pub use conv::{conv2d_same, conv2d_same_backward, ConvGrads};
pub use norm::{
    batch_norm, batch_norm_infer, batch_norm_train, instance_norm, instance_norm_with_cache,
    norm_backward, NormCache, NormGrads, RunningStats,
};
pub use pointwise::{
    activation, activation_backward, minmax_backward, minmax_normalize,
    minmax_normalize_with_cache, Activation, MinMaxCache,
};
pub use spatial::{
    avg_pool_same, avg_pool_same_backward, concat_channels, spatial_dropout,
    spatial_dropout_with_mask, split_channels,
};

/// Train/infer switch for normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
