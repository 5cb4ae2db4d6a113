//! Dense `f64` tensors, seeded sampling, and reverse-mode gradients.

mod kernels;
pub mod rng;
pub mod tape;
mod tensor;

pub use rng::{derive_stream_id, gaussian, RngStream};
pub use tape::{Gradients, KeyMask, Tape, Var};
pub use tensor::{l1_diff, matmul, population_std, population_std_of, Tensor};
