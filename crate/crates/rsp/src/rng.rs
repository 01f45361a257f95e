//! Deterministic stream derivation.
//!
//! Every random draw in this crate flows from an explicit 64-bit seed
//! through [`stream`]: the seed is mixed with a purpose label and any
//! number of counter words, and the result keys a ChaCha8 generator.
//! Workers that derive their streams from `(seed, label, index)` produce
//! identical output regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for one `(seed, label, counters)` stream.
pub fn stream(seed: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label, counters))
}

/// Mixes `(seed, label, counters)` into a single 64-bit key.
///
/// FNV-1a over the label bytes, then splitmix64 finalization over each
/// word. Stable across platforms and releases; checkpoints and probe
/// files depend on it staying fixed.
pub fn derive(seed: u64, label: &str, counters: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut key = mix(seed ^ h);
    for &c in counters {
        key = mix(key ^ mix(c));
    }
    key
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = (0..8).map(|_| ()).fold(Vec::new(), |mut acc, ()| {
            acc.push(stream(7, "test", &[3]).gen());
            acc
        });
        assert!(a.iter().all(|&x| x == a[0]));
    }

    #[test]
    fn labels_and_counters_separate_streams() {
        let base: u64 = stream(7, "a", &[0]).gen();
        assert_ne!(base, stream(7, "b", &[0]).gen());
        assert_ne!(base, stream(7, "a", &[1]).gen());
        assert_ne!(base, stream(8, "a", &[0]).gen());
    }
}
