//! Seed derivation. Every stochastic component draws from a ChaCha8 stream
//! keyed by the global seed plus a tag path, so one seed reproduces the
//! whole workflow.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a tag path.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut s = mix(root);
    for &t in tags {
        s = mix(s ^ t.wrapping_mul(0xff51afd7ed558ccd));
    }
    s
}

pub fn rng_for(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = rng_for(3, &[5]).sample_iter(rand::distributions::Standard).take(10).collect();
        let b: Vec<f64> = rng_for(3, &[5]).sample_iter(rand::distributions::Standard).take(10).collect();
        assert_eq!(a, b);
    }
}
