//! Tensor arithmetic, reverse-mode differentiation and the gradient checker.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::check_gradient;
pub use rng::Rng;
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::{Fnv, Tensor};
