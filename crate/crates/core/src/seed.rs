//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed off one master seed. A run's
//! seed is `mix(mix(mix(master) ^ task_id) ^ run_index)` where `mix` is the
//! SplitMix64 finalizer, so archives reproduce on any machine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one training run of one task.
pub fn run_seed(master: u64, task_id: usize, run_index: usize) -> u64 {
    mix(mix(mix(master) ^ task_id as u64) ^ run_index as u64)
}

/// Seed for a named pipeline stage (dataset synthesis, task shuffling, classifier SGD).
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    stage
        .bytes()
        .fold(mix(master), |acc, b| mix(acc ^ u64::from(b)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
