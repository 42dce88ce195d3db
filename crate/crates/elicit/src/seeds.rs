//! Deterministic seed derivation.
//!
//! Every stochastic component (world sampling, strategy noise, critic
//! initialization, product subsampling) draws its seed from a master seed via
//! [`derive_seed`], so a single master seed pins an entire run.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of tags into a new stream seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(GOLDEN));
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        let a = derive_seed(42, &[1, 2, 3]);
        let b = derive_seed(42, &[1, 2, 3]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(42, &[1, 2, 4]));
        assert_ne!(a, derive_seed(43, &[1, 2, 3]));
        // order matters
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
    }
}
