//! Counter-based random streams keyed by (master seed, stream index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `stream` under `seed`. The same pair always
/// yields the same sequence, whatever thread draws it.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
