//! Splittable counter-based seed derivation.
//!
//! Every random draw in an experiment is seeded by hashing a fixed tuple of
//! identifiers (master seed, seed index, task, epoch, ...) through a
//! SplitMix64 finalizer. Derivation is content-addressed rather than
//! sequential, so adding a strategy or reordering cells never perturbs another
//! cell's randomness. Batch-order seeds deliberately omit the strategy tag so
//! that strategies sharing a trajectory (e.g. EWC with lambda = 0 vs naive
//! sequential) see identical batch orders.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated draws on disjoint sub-streams.
mod tag {
    pub const STREAM: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const BATCH: u64 = 0x04;
    pub const ALPHA: u64 = 0x05;
    pub const PCA: u64 = 0x06;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a tuple of components into one sub-seed.
pub fn derive(components: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &c in components {
        h = splitmix64(h ^ c);
    }
    h
}

/// Seeded RNG for a derived sub-seed.
pub fn rng_from(components: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(components))
}

/// Seed context for one experiment cell: master seed plus replicate index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedCtx {
    pub master: u64,
    pub seed_index: u64,
}

impl SeedCtx {
    pub fn new(master: u64, seed_index: u64) -> Self {
        SeedCtx { master, seed_index }
    }

    /// Seed for drawing the task stream of this replicate.
    pub fn stream_seed(&self) -> u64 {
        derive(&[self.master, self.seed_index, tag::STREAM])
    }

    /// Seed for the stratified split of one task.
    pub fn split_seed(&self, task: u64) -> u64 {
        derive(&[self.master, self.seed_index, tag::SPLIT, task])
    }

    /// Seed for the shared network initialization of one architecture.
    /// `arch_tag` distinguishes the single-mode net from the mode net.
    pub fn init_seed(&self, arch_tag: u64) -> u64 {
        derive(&[self.master, self.seed_index, tag::INIT, arch_tag])
    }

    /// Batch-order seed. Strategy-independent by design so that paired
    /// strategies draw identical batch orders.
    pub fn batch_seed(&self, task: u64, epoch: u64, mode: u64) -> u64 {
        derive(&[self.master, self.seed_index, tag::BATCH, task, epoch, mode])
    }

    /// Seed for the simplex weights drawn during multi-mode initialization.
    pub fn alpha_seed(&self, epoch: u64) -> u64 {
        derive(&[self.master, self.seed_index, tag::ALPHA, epoch])
    }

    /// RNG for the simplex weights of one initialization epoch.
    pub fn alpha_rng(&self, epoch: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.alpha_seed(epoch))
    }

    /// Seed for power-iteration start vectors.
    pub fn pca_seed(&self, which: u64) -> u64 {
        derive(&[self.master, self.seed_index, tag::PCA, which])
    }
}
