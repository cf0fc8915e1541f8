//! Seeded random streams.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha8 stream that
//! is a pure function of `(seed, domain, index)`, so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

pub(crate) const DOMAIN_SPLIT: u64 = 0x5350_4c49;
pub(crate) const DOMAIN_BATCH: u64 = 0x4241_5443;
pub(crate) const DOMAIN_INIT: u64 = 0x494e_4954;
pub(crate) const DOMAIN_TRAIN: u64 = 0x5452_4149;
pub(crate) const DOMAIN_SYNTH: u64 = 0x5359_4e54;
pub(crate) const DOMAIN_BOOTSTRAP: u64 = 0x424f_4f54;

pub fn derive(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.rotate_left(29));
    rng.set_stream(index);
    rng
}
