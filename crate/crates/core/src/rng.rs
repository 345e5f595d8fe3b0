use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` under `seed`.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids, kept distinct so no two consumers ever share draws.
pub(crate) const GLYPH: u64 = 1;
pub(crate) const COLOR: u64 = 2;
pub(crate) const GRAYSCALE: u64 = 3;
pub(crate) const CORRUPT: u64 = 4;
pub(crate) const INIT: u64 = 5;
pub(crate) const BATCH: u64 = 6;
pub(crate) const SHUFFLE: u64 = 7;
pub(crate) const WEIGHTS: u64 = 8;
pub(crate) const TEST_COLORS: u64 = 9;
pub(crate) const VERIFY: u64 = 10;
