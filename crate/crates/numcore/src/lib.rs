//! Dense f64 tensors, a define-by-run tape for reverse-mode automatic
//! differentiation, and an Adam optimizer.
//!
//! Everything is single-threaded and deterministic: the same inputs always
//! produce bit-identical values and gradients. Non-finite values are never
//! stored; any operation that would produce one fails with
//! [`NumError::NonFinite`].

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use optim::{Adam, AdamConfig, ScalarAdam};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{causal_mask, Tape, Var};
pub use tensor::Tensor;
