//! Deep-equilibrium sequence models and a desk-scale spectrogram-masking
//! source separator.

pub mod deq;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod separator;
pub mod seqcore;
pub mod solvers;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{custom_gradient, vjp, Tape, Var};
pub use tensor::{ParamSet, Tensor};
