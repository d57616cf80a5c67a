//! Seed handling. One run seed fans out into named, independent sub-streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Tensor;

pub type Rng64 = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Child seed for the named sub-stream of `seed`.
pub fn split(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name)))
}

/// Child seed for the `index`-th member of a family (e.g. one per candidate).
pub fn split_index(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut impl Rng, dims: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.sample::<f32, _>(StandardNormal))
}

pub fn uniform_tensor(rng: &mut impl Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}
