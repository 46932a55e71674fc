//! Deterministic random streams keyed by (seed, iteration, purpose, index).
//!
//! Nothing in the pipeline carries RNG state across iterations, so a run can
//! be resumed from any snapshot and reproduce the uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Pose = 1,
    Jitter = 2,
    DiffAug = 3,
    BackAug = 4,
    PerspAug = 5,
    Init = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

pub fn stream(seed: u64, iteration: u64, kind: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, &[iteration, kind as u64, index]))
}

/// Uniform value in `[0, 1)` for ray `pixel` at `iteration`.
pub fn ray_jitter(seed: u64, iteration: u64, pixel: u64) -> f64 {
    let h = mix(seed, &[iteration, Stream::Jitter as u64, pixel]);
    (h >> 11) as f64 / (1u64 << 53) as f64
}
