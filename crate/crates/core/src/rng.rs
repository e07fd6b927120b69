//! Seed derivation for per-task random streams.
//!
//! Every sampling task (a group rollout, an evaluation pass, a step's prompt
//! draw) gets its own ChaCha stream keyed by a hash of its coordinates, so
//! results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of coordinates into one 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(GOLDEN, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Stream domains, so that e.g. prompt draws and rollouts never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Rollout = 1,
    Prompts = 2,
    Eval = 3,
}

pub fn task_rng(global_seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(coords.len() + 2);
    parts.push(global_seed);
    parts.push(stream as u64);
    parts.extend_from_slice(coords);
    ChaCha8Rng::seed_from_u64(mix_seed(&parts))
}
