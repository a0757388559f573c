//! Seeded, splittable randomness.
//!
//! Every consumer draws from its own ChaCha stream keyed by `(seed, stream)`,
//! so sampling inputs never perturbs target selection or augmentation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Target = 1,
    Inputs = 2,
    Augment = 3,
    Fresh = 4,
    Init = 5,
    Oracle = 6,
    Family = 7,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    stream_raw(seed, stream as u64)
}

pub fn stream_raw(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
