//! Counter-based random streams.
//!
//! Every stream is addressed by `(seed, worker, tag, counter)` and the tuple is
//! used directly as a ChaCha8 key, so streams never depend on the order in
//! which threads ask for them. Nothing in the crate keeps a global generator.

use rand::rngs::SmallRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct tags keep, say, minibatch sampling and
/// label noise independent even when seed, worker and counter coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    /// Minibatch indices for sampling with replacement.
    Sample = 1,
    /// Per-epoch permutations for sampling without replacement.
    Permutation = 2,
    /// Per-example gradient noise of synthetic problems.
    ExampleNoise = 3,
    /// Parameter initialisation.
    Init = 4,
    /// Synthetic dataset generation.
    Dataset = 5,
    /// Brownian increments of slow-SDE paths.
    SdePath = 6,
    /// Gradient noise in one-round moment experiments.
    Moments = 7,
}

/// Returns the generator for one stream address.
pub fn stream(seed: u64, worker: u64, tag: StreamTag, counter: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([seed, worker, tag as u64, counter])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// A fast non-cryptographic generator seeded from the stream at the same
/// address. Used in inner Monte Carlo loops where ChaCha would dominate the
/// run time; it is just as reproducible.
pub fn fast_stream(seed: u64, worker: u64, tag: StreamTag, counter: u64) -> SmallRng {
    SmallRng::from_rng(&mut stream(seed, worker, tag, counter))
}

/// Fills `out` with independent standard normals.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}
