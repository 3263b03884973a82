//! Multiscale cascade residual CNN for scene change detection.
//!
//! The pipeline has three stages: a residual background network that
//! highlights foreground, a multiscale residual processing module built from
//! dilated convolutions, and a segmentation network that turns the image and
//! the refined residual into a per-pixel foreground probability.

// Negated float comparisons throughout also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod config;
pub mod data;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Eager, Exec, Graph, NodeId};
pub use model::{Mcrcnn, ModelConfig};
pub use ops::Mode;
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tensor};
