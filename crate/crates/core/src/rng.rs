//! Seed derivation. One master seed is split into independent streams per
//! subsystem and counter, so toggling one subsystem never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Order = 2,
    Augment = 3,
    Dropout = 4,
    Synth = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(stream as u64)) ^ counter)
}

pub fn stream_rng(master: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, counter))
}
