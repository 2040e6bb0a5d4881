//! Differentiable primitives, the parameter registry and gradient checking.

pub mod gradcheck;
pub mod loss;
pub mod nn;
pub mod registry;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::{masked_cross_entropy, masked_cross_entropy_value};
pub use registry::{tensor_checksum, Bound, ParamEntry, ParameterRegistry, Stage};
pub use tape::{softmax_columns, Gradients, Tape, Var, IGNORE};
pub use tensor::Mat;

/// Deterministic 64-bit mixing (splitmix64 finaliser) used to derive RNG
/// streams from structured ids.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines several ids into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// FNV-1a hash of a string, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
