//! Seeded randomness. All stochastic steps draw from ChaCha8, whose output
//! stream is fixed by the algorithm and identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named sub-task, so adding draws to one stage
/// does not shift another.
pub fn substream(seed: u64, tag: &str) -> Rng {
    // FNV-1a over the tag, mixed with the base seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}
