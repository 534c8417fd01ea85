//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream keyed by `(seed, path...)`,
//! e.g. `(seed, step, view)`. Two draws with the same key are identical no
//! matter in which order the surrounding work executes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and a path of counters.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(0x5851_f42d))))
}

/// Opens the stream identified by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}

pub fn standard_normal_vec(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gaussian noise `n ~ N(0, sigma^2 I)`.
pub fn gaussian_noise(rng: &mut impl rand::Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}
