//! Labelled, splittable random streams.
//!
//! Every stochastic consumer receives its own generator derived from a master
//! seed and a label, so results do not depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type handed to all stochastic routines.
pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for `label`.
    pub fn child(&self, label: &str) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(fnv1a(label))),
        }
    }

    /// Child stream for the `index`-th member of a family (replicate, step, ...).
    pub fn indexed(&self, label: &str, index: u64) -> Self {
        let base = self.child(label);
        Self {
            seed: splitmix64(base.seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.seed)
    }

    pub fn rng_for(&self, label: &str) -> StreamRng {
        self.child(label).rng()
    }
}
