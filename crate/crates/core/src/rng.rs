//! Named, counter-addressed random streams.
//!
//! Every random draw in the library comes from `SeedStreams::rng(stream, index)`,
//! so a draw depends only on (root seed, stream, index). Training can resume
//! from a step counter alone and sub-systems can be varied independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Masking,
    Init,
    Probe,
    Augment,
    DropPath,
    Batching,
    Codebook,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Masking => 2,
            Stream::Init => 3,
            Stream::Probe => 4,
            Stream::Augment => 5,
            Stream::DropPath => 6,
            Stream::Batching => 7,
            Stream::Codebook => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn rng(&self, stream: Stream, index: u64) -> Rng {
        let mut s = splitmix(self.root ^ 0x5EED_0F_A11);
        s = splitmix(s ^ stream.id());
        s = splitmix(s ^ index);
        Rng::seed_from_u64(s)
    }

    /// Sub-stream of a sub-stream, e.g. (step, sample).
    pub fn rng2(&self, stream: Stream, a: u64, b: u64) -> Rng {
        self.rng(stream, splitmix(a).wrapping_add(b))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
