//! Dense tensors, reverse-mode differentiation, neural layers and RAdam.
//!
//! Everything runs single-threaded in `f64`. Given the same seed and inputs,
//! forward and backward passes are bitwise reproducible.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod radam;
pub mod tape;
pub mod tensor;

#[cfg(test)]
mod op_tests;

pub use nn::{ConvStack, EncoderLayer, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
pub use radam::{RAdam, RAdamConfig, StepKind};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness is needed.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}
