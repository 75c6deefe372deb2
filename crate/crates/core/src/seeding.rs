//! Counter-based seeding. Every random draw in training is a pure function of
//! the run seed, a stream tag and an index, so no generator state has to be
//! checkpointed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_ORDER: u64 = 1;
pub const STREAM_CROP: u64 = 2;
pub const STREAM_GP: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_INIT_GENERATOR: u64 = 5;
pub const STREAM_INIT_CRITIC: u64 = 6;
pub const STREAM_SYNTH_DEPTH: u64 = 7;

pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"blgseed\0");
    ChaCha8Rng::from_seed(key)
}

pub fn derived_seed(seed: u64, stream: u64, index: u64) -> u64 {
    use rand::Rng;
    derived_rng(seed, stream, index).random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = derived_rng(1, STREAM_CROP, 5).random();
        assert_eq!(a, derived_rng(1, STREAM_CROP, 5).random::<u64>());
        assert_ne!(a, derived_rng(1, STREAM_ORDER, 5).random::<u64>());
        assert_ne!(a, derived_rng(1, STREAM_CROP, 6).random::<u64>());
        assert_ne!(a, derived_rng(2, STREAM_CROP, 5).random::<u64>());
    }
}
