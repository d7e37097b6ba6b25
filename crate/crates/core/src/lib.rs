//! Feature-complexity analysis toolkit: disentangles an intermediate-layer
//! feature of a small network into complexity-ordered components, scores
//! their significance, effectiveness, over-fitting, and reliability, and
//! predicts network performance from the resulting complexity profile.

pub mod attribution;
pub mod checkpoint;
pub mod disentangler;
pub mod error;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod zoo;
pub mod reliability;
pub mod tensor;
pub mod train;

pub use error::{FcxError, Result};
pub use tensor::{Init, Tensor};
