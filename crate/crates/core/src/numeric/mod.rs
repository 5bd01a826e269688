//! Dense 64-bit arrays, the parameter store and a small reverse-mode
//! differentiation tape with the operations the scorers need.

mod array;
pub mod gradcheck;
pub mod kernels;
mod store;
pub mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use kernels::{
    bilinear, cross_entropy, lstm_encode, sigmoid, softmax, LstmWeights, CE_EPSILON,
};
pub use store::{clip_global_norm, sgd_step, Gradients, ParameterStore};
pub use tape::{Tape, Var};
