//! Reverse-mode automatic differentiation over dense tensors.

pub mod kernels;
mod tape;

pub use tape::{BnMode, BnStats, Tape, Var};
