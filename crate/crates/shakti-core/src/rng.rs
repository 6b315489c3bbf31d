//! Deterministic random number streams.
//!
//! Every consumer of randomness (parameter init, data generation, sampling)
//! derives its own named stream from a single root seed. Streams are
//! independent of creation order and of each other, so adding a new consumer
//! never perturbs existing ones. ChaCha8 keeps the byte sequence identical
//! across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Used for stream naming and for checkpoint digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed for a named stream from the root seed.
pub fn stream_seed(root_seed: u64, name: &str) -> u64 {
    root_seed ^ fnv1a64(name.as_bytes())
}

/// A deterministic generator for the stream `name` under `root_seed`.
pub fn stream(root_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root_seed, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fnv1a64_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a1 = stream(7, "init/encoder");
        let mut a2 = stream(7, "init/encoder");
        let mut b = stream(7, "data/train");
        let xs1: Vec<u64> = (0..8).map(|_| a1.random()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.random()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn different_seeds_give_different_streams() {
        let mut a = stream(1, "data/train");
        let mut b = stream(2, "data/train");
        let xs: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.random()).collect();
        assert_ne!(xs, ys);
    }
}
