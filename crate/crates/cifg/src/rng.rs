//! Deterministic seed derivation.
//!
//! Every stochastic consumer gets its own stream derived from the run seed
//! and a stable label (parameter name, "batches", "dropout", ...). Adding or
//! removing one consumer therefore never shifts another's stream, which is
//! what makes e.g. a hybrid run with a disabled branch reproduce a
//! single-branch run parameter-for-parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label, mixed with the base seed through splitmix64.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Labeled RNG factory for one run.
#[derive(Debug, Clone, Copy)]
pub struct SeedSource {
    base: u64,
}

impl SeedSource {
    pub fn new(base: u64) -> SeedSource {
        SeedSource { base }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn rng(&self, label: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.base, label))
    }
}
