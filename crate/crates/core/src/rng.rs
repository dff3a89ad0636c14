//! Hierarchical random streams.
//!
//! Every random draw in a run comes from a generator keyed by
//! `(run seed, round, client, purpose)`. Streams for different keys are
//! independent, so the order in which clients or rounds are processed never
//! changes the result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

/// Client slot used for draws made by the server or compute parties.
pub const SERVER: u64 = u64::MAX;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Workload = 1,
    Partition = 2,
    Dataset = 3,
    Sampling = 4,
    Select = 5,
    Measure = 6,
    LocalMeasure = 7,
    Shares = 8,
    Synthesize = 9,
    Split = 10,
    Init = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub round: u64,
    pub client: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, round: u64, client: u64, purpose: Purpose) -> Self {
        StreamKey {
            seed,
            round,
            client,
            purpose,
        }
    }

    /// Same key with an extra discriminator mixed into the client slot.
    pub fn with_index(mut self, index: u64) -> Self {
        self.client = mix(self.client ^ mix(index.wrapping_add(0x51_7c_c1_b7)));
        self
    }

    pub fn rng(&self) -> RunRng {
        let mut h = mix(self.seed);
        h = mix(h ^ self.round.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        h = mix(h ^ self.client.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
        h = mix(h ^ (self.purpose as u64).wrapping_mul(0x1656_67b1_9e37_79f9));
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// Shorthand for `StreamKey::new(..).rng()`.
pub fn stream(seed: u64, round: u64, client: u64, purpose: Purpose) -> RunRng {
    StreamKey::new(seed, round, client, purpose).rng()
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
