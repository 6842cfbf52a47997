use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere. ChaCha8 gives a stable, portable stream.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `i`: `splitmix64(seed ^ splitmix64(i))`.
pub fn child_seed(seed: u64, i: u64) -> u64 {
    splitmix64(seed ^ splitmix64(i))
}
