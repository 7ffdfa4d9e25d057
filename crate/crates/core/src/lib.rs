//! Dynamic-routing semantic segmentation trained jointly with a jigsaw
//! pretext task and semi-supervised consistency (mean teacher or
//! cross-pseudo supervision), on top of a small reverse-mode autodiff core.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod jigsaw;
pub mod kernels;
pub mod metrics;
pub mod params;
pub mod routing;
pub mod semisup;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, IGNORE_INDEX};
pub use tensor::Tensor;
