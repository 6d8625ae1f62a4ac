//! Deterministic stream derivation.
//!
//! Every random draw in the crate comes from a stream keyed by a root seed
//! plus a short list of integer tags (purpose, scene index, anchor index, ...).
//! Streams are independent of evaluation order, so scene or seed parallelism
//! cannot change results.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Kept in one place so two call sites can never collide.
pub mod tag {
    pub const PROTOTYPE: u64 = 1;
    pub const SCENE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const HEAD_INIT: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const EXTRACTOR_INIT: u64 = 6;
    pub const CLASSIFIER_INIT: u64 = 7;
    pub const NOVEL_CENTER: u64 = 8;
    pub const GRADCHECK: u64 = 9;
    pub const HOLDOUT: u64 = 10;
    pub const OBJECTNESS: u64 = 11;
    pub const BG_CROP: u64 = 12;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix `(root, tags)` down to a single derived seed.
pub fn mix(root: u64, tags: &[u64]) -> u64 {
    let mut state = root ^ 0xa0761d6478bd642f;
    let _ = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xe7037ed1a0b428db);
        let _ = splitmix64(&mut state);
    }
    splitmix64(&mut state)
}

/// Derive an independent ChaCha8 stream from `(root, tags)`.
pub fn derive_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = root ^ 0xa0761d6478bd642f;
    let _ = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xe7037ed1a0b428db);
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw via Box-Muller. Consumes exactly two uniforms.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a slice with iid normal draws scaled by `std`.
pub fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64], std: f64) {
    for v in out.iter_mut() {
        *v = std * normal(rng);
    }
}
