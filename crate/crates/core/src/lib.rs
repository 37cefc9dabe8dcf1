//! Bottom-up multi-person pose estimation with stacked hourglass networks
//! built from depthwise separable, mixed-kernel and squeeze-excite blocks.
//!
//! The crate covers the whole inference-side pipeline: tensors and CPU
//! kernels, a small layer-graph IR with an analytic cost model, ground-truth
//! map encoding, centroid-rooted grouping, PCKh scoring and a synthetic scene
//! generator used as a test oracle.

// NaN-rejecting checks read better as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod annotation;
pub mod blocks;
pub mod codec;
pub mod cost;
pub mod decode;
pub mod dshg;
pub mod error;
pub mod graph;
pub mod hourglass;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod selftest;
pub mod skeleton;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use skeleton::{PoseTree, TreeVariant, CENTROID, NUM_JOINTS};
pub use tensor::{Shape, Tensor};
