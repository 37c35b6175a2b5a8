//! Seed derivation.
//!
//! Every random draw descends from one root seed. A sub-seed is
//! `splitmix64(splitmix64(root ^ stream_tag) ^ counter)`, and each sub-seed
//! seeds its own ChaCha8 generator. Streams in use:
//!
//! | stream      | counter                    |
//! |-------------|----------------------------|
//! | `Maps`      | 0                          |
//! | `Sample`    | split offset + sample id   |
//! | `Init`      | 0                          |
//! | `Shuffle`   | epoch                      |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Dataset projection and mixing maps.
    Maps,
    /// Per-sample latents and noise.
    Sample,
    /// Model parameter initialization.
    Init,
    /// Epoch batch order.
    Shuffle,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Maps => 0x6d61_7073,
            Stream::Sample => 0x7361_6d70,
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(root ^ stream.tag()) ^ counter)
}

pub fn stream_rng(root: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, counter))
}
