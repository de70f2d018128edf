//! Deterministic tensor math with reverse-mode automatic differentiation.
//!
//! All math runs in 64-bit floats. Tensors are immutable once produced by an
//! op; a [`Tape`] and the [`ParamSet`] it binds belong to one training
//! thread, while distinct tapes may run concurrently.

mod adamw;
mod attention;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::AdamW;
pub use attention::{multi_head_attention, multi_head_attention_grouped, MhaSlots, MhaWeights};
pub use gradcheck::grad_check;
pub use params::{Binding, ParamSet, ParamSlot};
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
