//! Deterministic random streams.
//!
//! Every replication, stage and method gets its own ChaCha stream derived
//! from the master seed, so results never depend on scheduling order and
//! adding a method leaves the other methods' streams untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Pipeline stage tag mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stage {
    Pilot = 0,
    Simulate = 1,
    Ampute = 2,
    Impute = 3,
}

/// Generator seeded from a single integer.
pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stream for `(replication, stage, lane)` under `master_seed`.
///
/// The stream id packs the replication index into the upper 40 bits, the
/// stage into the next 8 and the lane (method index) into the low 16.
pub fn stream(master_seed: u64, replication: u64, stage: Stage, lane: u16) -> SimRng {
    debug_assert!(replication < (1 << 40));
    let mut rng = SimRng::seed_from_u64(master_seed);
    rng.set_stream((replication << 24) | ((stage as u64) << 16) | u64::from(lane));
    rng
}
