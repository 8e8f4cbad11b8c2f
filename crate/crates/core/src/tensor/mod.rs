//! Dense tensors and a reverse-mode autodiff tape.

mod array;
mod kernels;
mod param;
mod tape;

pub use array::{Mask, Tensor};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

pub(crate) use tape::elu_plus_one;
