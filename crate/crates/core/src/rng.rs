//! Named random streams derived from one global seed.
//!
//! Each consumer (data order, negatives, masking, initialization, ...)
//! draws from its own stream keyed by a name and optional indices, so
//! enabling one feature never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, name: &str, ids: &[u64]) -> u64 {
        let mut h = splitmix64(self.seed ^ fnv1a(name));
        for &id in ids {
            h = splitmix64(h ^ splitmix64(id));
        }
        h
    }

    pub fn stream(&self, name: &str, ids: &[u64]) -> Rng {
        Rng::seed_from_u64(self.derive(name, ids))
    }
}
