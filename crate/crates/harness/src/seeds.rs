//! Independent deterministic streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Process,
    Mixing,
    Change,
    SourceData,
    TargetData,
    Encoder,
    Classifier,
    Adaptation,
    FineTune,
    Scratch,
}

impl Stream {
    fn id(self) -> u64 {
        self as u64 + 1
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `stream` of experiment `seed`, optionally specialized by `index`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream.id()) ^ index)
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        let a = derive(1, Stream::Process, 0);
        assert_ne!(a, derive(1, Stream::Mixing, 0));
        assert_ne!(a, derive(2, Stream::Process, 0));
        assert_ne!(a, derive(1, Stream::Process, 1));
        assert_eq!(a, derive(1, Stream::Process, 0));
    }
}
