//! Desk-scale laboratory for parameter-efficient cross-lingual transfer.
//!
//! * [`tensor`]: `f64` tensors with a define-by-run autodiff tape.
//! * [`model`]: tiny transformer encoder, pooling and task heads.
//! * [`peft`]: soft prompt, LoRA, bottleneck adapter and freeze plans.
//! * [`objective`]: task, alignment and L2-SP losses and their weighted sum.
//! * [`corpus`]: synthetic source/cipher-language tasks and pseudo-data.
//! * [`trainer`]: masked Adam training, evaluation, stability and sweeps.
//! * [`gradcheck`]: finite-difference verification of the full objective.

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod peft;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{AdaptedModel, TaskKind, TransformerConfig};
pub use tensor::{Tape, Tensor, Var};
