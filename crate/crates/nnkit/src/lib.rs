//! Minimal deterministic reverse-mode differentiation for small recurrent
//! models: dense linear maps, elementwise nonlinearities, temporal
//! convolution, GRU cells and sequences, signed affine scans, a named
//! parameter store with AdamW, and a binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod optim;
mod param;
pub mod scan;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use optim::{Adam, AdamW, Schedule};
pub use param::{ParamId, ParamStore};
pub use tape::{softplus, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
