//! Reverse-mode automatic differentiation and the neural blocks built on it.

pub mod checkpoint;
pub mod nn;
pub mod params;
pub mod real;
pub mod tape;

pub use checkpoint::{Checkpoint, NamedArray};
pub use nn::{AttentionPool, GruCell, Linear, LstmCell, Mlp};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
