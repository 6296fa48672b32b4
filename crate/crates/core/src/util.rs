//! Seed derivation and small numeric helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a child seed from a root seed and a purpose tag.
///
/// FNV-1a over the tag mixed with the root seed; stable across runs and
/// platforms (std's hasher is randomized, so it cannot be used here).
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ root.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded generator for a (root, tag) pair.
pub fn rng_for(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}

/// Survival function of Binomial(n, 1/2): P(X >= k), computed in f64.
pub fn binomial_sf_half(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    // ln C(n, i) accumulated incrementally to stay finite for large n.
    let mut ln_c = 0.0f64; // ln C(n, 0)
    let ln2 = std::f64::consts::LN_2;
    let mut total = 0.0f64;
    for i in 0..=n {
        if i >= k {
            total += (ln_c - n as f64 * ln2).exp();
        }
        if i < n {
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    total.min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(7, "a"), derive_seed(7, "a"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
        assert_ne!(derive_seed(7, "a"), derive_seed(8, "a"));
    }

    #[test]
    fn binomial_tail_matches_hand_values() {
        // P(X >= 2 | n=3) = (3 + 1)/8 = 0.5
        assert!((binomial_sf_half(3, 2) - 0.5).abs() < 1e-12);
        // P(X >= 0) = 1
        assert!((binomial_sf_half(10, 0) - 1.0).abs() < 1e-12);
        // Symmetry: P(X >= k) + P(X >= n-k+1) = 1 for fair coin
        let a = binomial_sf_half(64, 42);
        let b = binomial_sf_half(64, 23);
        assert!((a + b - 1.0).abs() < 1e-9);
    }
}
