//! Dense arithmetic, special functions, seeded randomness and reverse-mode gradients.

mod rng;
pub mod special;
mod tape;
mod tensor;

pub use rng::Rng;
pub use special::{digamma, ln_factorial, log_gamma, log_sum_exp, sigmoid, softmax, softplus};
pub use tape::{GradTape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
