//! Reproducible, stream-separated randomness.
//!
//! Every consumer draws from a ChaCha8 generator keyed by `(seed, stream)`
//! and positioned at a per-item offset, so item `i` always sees the same
//! numbers regardless of how work is partitioned across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Named random streams. Paths used to estimate bounds must never be drawn
/// from the training stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Train,
    Lower,
    Upper,
    Init,
    Shuffle,
    BiasLab,
    Custom(u64),
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Train => 1,
            Stream::Lower => 2,
            Stream::Upper => 3,
            Stream::Init => 4,
            Stream::Shuffle => 5,
            Stream::BiasLab => 6,
            Stream::Custom(id) => 0x1000 + id,
        }
    }

    pub fn name(self) -> String {
        match self {
            Stream::Train => "train".into(),
            Stream::Lower => "lower".into(),
            Stream::Upper => "upper".into(),
            Stream::Init => "init".into(),
            Stream::Shuffle => "shuffle".into(),
            Stream::BiasLab => "biaslab".into(),
            Stream::Custom(id) => format!("custom-{id}"),
        }
    }
}

/// Seed plus stream: the full description of a source of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub seed: u64,
    pub stream: Stream,
}

/// Each item gets 2^32 32-bit words of keystream, far more than any path needs.
const WORDS_PER_ITEM_LOG2: u32 = 32;

impl RandomSpec {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self { seed, stream }
    }

    /// Generator for item `index` (a path, a replication, a time step...).
    pub fn item_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.id());
        rng.set_word_pos((index as u128) << WORDS_PER_ITEM_LOG2);
        rng
    }

    /// Derived spec for a sub-problem, e.g. one time step of a backward sweep.
    pub fn derive(&self, tag: u64) -> RandomSpec {
        RandomSpec {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))),
            stream: self.stream,
        }
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
