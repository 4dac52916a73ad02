//! Named random sub-streams derived from one master seed.
//!
//! Each `(master, stream, index)` triple maps to an independent ChaCha8
//! stream, so scenes can be generated in any order (or in parallel) and still
//! agree bit for bit with a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainScenes,
    TestScenes,
    Init,
    Sampling,
    TrainFeatures,
    EvalFeatures,
    Injection,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::TrainScenes => 0x7472_6169_6e00_0001,
            Stream::TestScenes => 0x7465_7374_0000_0002,
            Stream::Init => 0x696e_6974_0000_0003,
            Stream::Sampling => 0x7361_6d70_0000_0004,
            Stream::TrainFeatures => 0x7466_6561_7400_0005,
            Stream::EvalFeatures => 0x6566_6561_7400_0006,
            Stream::Injection => 0x696e_6a65_6374_0007,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `index` within the named stream.
pub fn stream(master: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(master ^ splitmix(which.tag())));
    rng.set_stream(index);
    rng
}

/// Packs a `(outer, inner)` pair into one stream index.
pub fn sub_index(outer: u64, inner: u64) -> u64 {
    (outer << 8) | (inner & 0xff)
}
