//! Learned dual-control surrogate-assisted evolutionary optimization.

pub mod agent;
pub mod ela;
pub mod error;
pub mod evolve;
pub mod infill;
pub mod pareto;
pub mod population;
pub mod problems;
pub mod scalar;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, the default element type.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamSet64 = tensor::ParamSet<f64>;
pub type ParamSet32 = tensor::ParamSet<f32>;
pub type Agent64 = agent::Agent<f64>;
pub type Agent32 = agent::Agent<f32>;

/// Derives an independent sub-seed from `root` and a path of stream tags.
///
/// Each tag is folded in with a SplitMix64 finalizer, so distinct paths give
/// unrelated streams and the mapping is stable across platforms.
pub fn sub_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(root), |acc, &tag| mix(acc ^ mix(tag.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
