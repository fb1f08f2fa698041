//! Keyed random substreams.
//!
//! Every stochastic event in an episode draws from its own generator, seeded
//! from `(run seed, purpose, vehicle, other, step)`. Two episodes that share a
//! run seed therefore see identical noise for identical events, regardless of
//! which other events happen in between.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Gps = 1,
    Range = 2,
    Gcpso = 3,
    LinkDrop = 4,
    Scenario = 5,
    RunSeed = 6,
    Unpaired = 7,
}

const NO_PEER: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Generator for one event.
pub fn substream(seed: u64, purpose: Purpose, vehicle: u32, other: Option<u32>, step: u32) -> SimRng {
    let key = mix(&[
        seed,
        purpose as u64,
        vehicle as u64,
        other.map_or(NO_PEER, u64::from),
        step as u64,
    ]);
    ChaCha8Rng::seed_from_u64(key)
}

/// Seed of the `index`-th run of an ensemble.
pub fn run_seed(base: u64, index: u32) -> u64 {
    mix(&[base, Purpose::RunSeed as u64, index as u64])
}

/// Generator used for scenario synthesis.
pub fn scenario_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(mix(&[seed, Purpose::Scenario as u64]))
}
