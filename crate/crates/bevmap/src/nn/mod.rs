//! Minimal f64 tensor math and reverse-mode autodiff.
//!
//! Everything is row-major, single-threaded and deterministic: a fixed input
//! always produces bit-identical output, which the equation-fidelity and
//! reproducibility suites rely on. Tape ops delegate their forward math to
//! plain tensor functions so test oracles can call the exact same code path.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
