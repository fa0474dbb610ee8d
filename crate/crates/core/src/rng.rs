//! Keyed random substreams.
//!
//! Every random quantity in the crate is drawn from a stream addressed by a
//! path of integer labels below the user seed, e.g.
//! `(seed, step, m-index, replicate)`. Streams never depend on scheduling, so
//! results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const BOOTSTRAP: u64 = 0x42_4f_4f_54;
    pub const NULL_SAMPLING: u64 = 0x4e_55_4c_4c;
    pub const DATA: u64 = 0x44_41_54_41;
    pub const METHOD: u64 = 0x4d_45_54_48;
    pub const CV_FOLDS: u64 = 0x43_56_46_44;
    pub const RETRY: u64 = 0x52_45_54_52;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ 0x6a09_e667_f3bc_c908))
    }

    /// Child stream identified by `label`; does not disturb `self`.
    pub fn derive(self, label: u64) -> Self {
        StreamKey(mix64(self.0 ^ mix64(label.wrapping_add(0x9e37_79b9_7f4a_7c15))))
    }

    pub fn derive_path(self, labels: &[u64]) -> Self {
        labels.iter().fold(self, |k, &l| k.derive(l))
    }

    pub fn rng(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut s = self.0;
        for chunk in seed.chunks_exact_mut(8) {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            chunk.copy_from_slice(&mix64(s).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
