//! Seeded random streams. Every consumer of randomness owns a separate
//! ChaCha stream derived from the run seed, so toggling one consumer (for
//! example diagnostics) never shifts the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type RunRng = ChaCha8Rng;

/// Named stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const ENV_RESET: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const CFM: u64 = 4;
    pub const CRITIC_SHUFFLE: u64 = 5;
    pub const DIAG: u64 = 6;
    pub const EVAL: u64 = 7;
}

pub fn stream(seed: u64, stream: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a sub-seed, e.g. for per-epoch reseeding.
pub fn derive(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data)
}
