//! One 64-bit seed fans out into independent ChaCha streams, one per consumer,
//! so adding draws in one place never shifts the randomness elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    SyntheticClasses = 1,
    SyntheticSamples = 2,
    ClassSplit = 3,
    SampleSplit = 4,
    GatingSplit = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
