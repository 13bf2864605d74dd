//! Seed derivation.
//!
//! Every random stream in an experiment is derived from the single root seed
//! in the config. A component seed is `splitmix64(root ^ fnv1a(component) + index)`,
//! so adding a new component never perturbs the streams of existing ones.
//!
//! Components in use:
//!
//! | component      | index     | consumer                                  |
//! |----------------|-----------|-------------------------------------------|
//! | `run`          | run index | per-run seed (all below derive from it)   |
//! | `split`        | 0         | target train/val/test permutation         |
//! | `init.G` etc.  | 0         | parameter initialisation of each network  |
//! | `batches`      | 0         | mini-batch order                          |
//! | `buffer`       | 0         | image-buffer swap decisions               |
//! | `augment`      | 0         | augmentation baselines                    |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, component: &str, index: u64) -> u64 {
    splitmix64((root ^ fnv1a(component)).wrapping_add(index))
}

pub fn rng_for(root: u64, component: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_independent() {
        assert_ne!(derive_seed(7, "split", 0), derive_seed(7, "batches", 0));
        assert_ne!(derive_seed(7, "run", 0), derive_seed(7, "run", 1));
        assert_eq!(derive_seed(7, "run", 3), derive_seed(7, "run", 3));
    }
}
