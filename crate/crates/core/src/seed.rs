//! Named seed derivation so independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds(u64);

impl Seeds {
    pub fn new(root: u64) -> Self {
        Seeds(root)
    }

    pub fn root(self) -> u64 {
        self.0
    }

    /// Deterministic child seed for a label.
    pub fn derive(self, label: &str) -> u64 {
        let mut h = splitmix(self.0 ^ 0x5851_f42d_4c95_7f2d);
        for b in label.bytes() {
            h = splitmix(h ^ u64::from(b));
        }
        h
    }

    /// Child seed for a label plus integer indices (epoch, trial, ...).
    pub fn derive_indexed(self, label: &str, idx: &[u64]) -> u64 {
        idx.iter().fold(self.derive(label), |h, &i| splitmix(h ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    pub fn rng(self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(label))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
