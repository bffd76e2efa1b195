//! Seed plumbing. Every random draw in the crate goes through a ChaCha8
//! generator whose stream id names its purpose, so the basis, the SAE
//! initialisation and the training data never share randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_BASIS: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_DATA: u64 = 3;
pub const STREAM_EXTEND: u64 = 4;
pub const STREAM_RANDOM_SUBSPACE: u64 = 5;
pub const STREAM_ORACLE: u64 = 6;
pub const STREAM_CONTINUE: u64 = 7;

/// Generator for `seed` on the given purpose stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
