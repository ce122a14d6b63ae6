//! Named random streams.
//!
//! Every consumer of randomness asks for its own stream by `(seed, purpose)`.
//! The stream key is `splitmix64(seed ^ fnv1a64(purpose))`, expanded into a
//! ChaCha8 generator, so adding a new consumer never shifts the draws seen by
//! an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key for the stream `purpose` under `seed`.
pub fn stream_key(seed: u64, purpose: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(purpose.as_bytes()))
}

pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, purpose))
}

/// Sub-stream `index` of `purpose`, e.g. one per epoch.
pub fn indexed_stream(seed: u64, purpose: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(stream_key(seed, purpose) ^ splitmix64(index)))
}
