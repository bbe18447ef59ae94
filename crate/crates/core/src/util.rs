//! Seeded RNG and parameter-initialization helpers. Everything routes
//! through explicit `u64` seeds so runs are reproducible.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic RNG from a bare seed.
pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derives a sub-seed from a parent seed and a stream label, so independent
/// components (images, stages, phases) get decorrelated streams.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = parent ^ 0x9e37_79b9_7f4a_7c15;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Matrix with i.i.d. entries from U[-scale, scale].
pub fn uniform_matrix(r: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn fan_in_matrix(r: &mut ChaCha12Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    uniform_matrix(r, rows, cols, scale)
}

/// Standard-normal vector.
pub fn randn_vector(r: &mut ChaCha12Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| StandardNormal.sample(r))
}

/// Standard-normal vector scaled to unit ℓ2 norm.
pub fn random_unit_vector(r: &mut ChaCha12Rng, len: usize) -> Array1<f64> {
    loop {
        let v = randn_vector(r, len);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}
