//! Seed derivation. Every random stream in the simulator is keyed by the
//! master seed plus a tuple of integers (client id, round, purpose tag), so
//! results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const CORRUPT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const SAMPLING: u64 = 5;
    pub const TTA: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const INIT: u64 = 9;
    pub const REPLAY: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(master: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, parts))
}
