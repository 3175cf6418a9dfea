//! Keyed random streams.
//!
//! Every rollout draws its disturbances from a ChaCha8 stream whose 256-bit
//! key is the tuple `(experiment seed, replication, purpose, policy,
//! iteration)` laid out word by word. The layout is injective, so two
//! distinct keys never share a stream, and a stream depends only on its key:
//! serial and parallel execution see identical samples, and a run of length
//! `N'` is a prefix of a run of length `N > N'`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Cost and value rollouts of the same policy at
/// the same iteration come from different purposes, hence independent draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Purpose {
    CostRollout = 1,
    ValueRollout = 2,
    Evaluation = 3,
    Generation = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamKey {
    pub seed: u64,
    pub replication: u64,
    pub purpose: Purpose,
    pub policy: u32,
    pub iteration: u64,
}

impl StreamKey {
    pub fn new(seed: u64, replication: u64, purpose: Purpose, policy: u32, iteration: u64) -> Self {
        Self {
            seed,
            replication,
            purpose,
            policy,
            iteration,
        }
    }

    /// The raw 32-byte ChaCha key.
    pub fn to_bytes(&self) -> [u8; 32] {
        let tagged = ((self.purpose as u64) << 32) | u64::from(self.policy);
        let mut out = [0u8; 32];
        for (chunk, word) in out
            .chunks_exact_mut(8)
            .zip([self.seed, self.replication, tagged, self.iteration])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.to_bytes())
    }
}

/// Stream source bound to one `(seed, replication)` pair, handed to the
/// selector loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub seed: u64,
    pub replication: u64,
}

impl Streams {
    pub fn new(seed: u64, replication: u64) -> Self {
        Self { seed, replication }
    }

    pub fn key(&self, purpose: Purpose, policy: usize, iteration: u64) -> StreamKey {
        StreamKey::new(self.seed, self.replication, purpose, policy as u32, iteration)
    }

    pub fn stream(&self, purpose: Purpose, policy: usize, iteration: u64) -> ChaCha8Rng {
        self.key(purpose, policy, iteration).stream()
    }
}
