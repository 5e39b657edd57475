//! Seeded random streams.
//!
//! Every random draw in the library comes from a [`DyRng`] derived from a
//! single `u64` root seed and a stream name. Stream names used by the crate:
//!
//! | name | consumer |
//! |------|----------|
//! | `data` | initial conditions of simulated trajectories |
//! | `init` | network weights, under a root from `init-interpolator`, `init-forecaster` or `init-barebone` |
//! | `shuffle` | batch order |
//! | `train` | per-example `i` / `n` draws |
//! | `dropout`, `noise` | training-time dropout masks and conditioning noise |
//! | `eval-train`, `eval-val` | stochastic loss evaluation |
//! | `member` | ensemble member, keyed by [`member_seed`] |
//! | `perturb`, `upsample` | perturbation baseline, output upsampling |
//! | `ode` | random systems in the error-order study |
//!
//! Training stages run under derived roots `train-interpolator`,
//! `train-forecaster` and `train-barebone`; evaluation windows under
//! `eval-window-{w}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DyRng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in name.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// A named substream of `root`. Distinct names give independent streams.
pub fn substream(root: u64, name: &str) -> DyRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(fnv1a(name));
    rng
}

/// Seed recorded for ensemble member `m`; feeding it to [`member_stream`]
/// reproduces that member.
pub fn member_seed(root: u64, m: usize) -> u64 {
    let mut z = root ^ fnv1a(&format!("member-{m}"));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A child root seed, for stages that derive their own substreams.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(root, name).next_u64()
}

pub fn member_stream(member_seed: u64) -> DyRng {
    substream(member_seed, "member")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = substream(7, "data").random_iter().take(4).collect();
        let b: Vec<u64> = substream(7, "data").random_iter().take(4).collect();
        let c: Vec<u64> = substream(7, "init").random_iter().take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(member_seed(7, 0), member_seed(7, 1));
    }
}
