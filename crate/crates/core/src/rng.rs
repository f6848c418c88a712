//! Deterministic RNG streams.
//!
//! Every random draw in training is taken from a stream derived from
//! `(seed, step, purpose)`, so a run resumed at step `k` sees exactly the
//! draws an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Timestep = 3,
    Noise = 4,
    TeacherNoise = 5,
    GuidanceNoise = 6,
    Sample = 7,
    Eval = 8,
}

pub fn stream(seed: u64, step: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 4) | purpose as u64);
    rng
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
