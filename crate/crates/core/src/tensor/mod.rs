//! Minimal tensor autodiff: dynamic-dimension f64 arrays, a reverse-mode
//! tape, and the op set the networks in this crate need.

pub mod ops;
pub mod tape;

pub use tape::{gradcheck, Gradients, Tape, Var};
