//! Single-shot multibox detection with shallow-layer extension modules.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`autograd`], [`gradcheck`]: dense tensors, forward
//!   and backward kernels, a reverse-mode tape and a finite-difference checker.
//! - [`graph`]: declarative layer DAGs, the SSD/ESSD builders (including the
//!   deconvolution-fusion extension module) and forward execution.
//! - [`depth`]: weighted average depth of layers and the coefficient of
//!   variation across prediction sources, in exact rational arithmetic.
//! - [`anchors`], [`loss`]: default boxes, matching, offset coding and the
//!   multibox objective with hard negative mining.
//! - [`train`]: the three-phase schedule, SGD with momentum, a synthetic
//!   shapes dataset and the binary weight format.
//! - [`eval`]: decoding, NMS, VOC2007 11-point AP and a batch-1 benchmark.

pub mod anchors;
pub mod autograd;
pub mod depth;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{DepthError, EvalError, GeometryError, GraphError, TensorError, TrainError};
pub use tensor::{Scalar, Tensor};
