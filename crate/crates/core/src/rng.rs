//! Seeded random streams.
//!
//! Every randomized operation draws from ChaCha8 (`rand_chacha`). A stream
//! is addressed by `(seed, domain, a, b)`, and the address is written
//! directly into the 256-bit key: seed in bytes 0..8, domain in byte 8, `a`
//! in bytes 9..13 and `b` in bytes 13..17, all little-endian. Distinct
//! addresses therefore give distinct generators, and each stream depends
//! only on its own address, so work that is split across threads reproduces
//! the sequential result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Split = 1,
    Grow = 2,
    Bootstrap = 3,
    CvPartition = 4,
    MlpInit = 5,
    PlsFolds = 6,
    Synth = 7,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, a: u32, b: u32) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = domain as u8;
    key[9..13].copy_from_slice(&a.to_le_bytes());
    key[13..17].copy_from_slice(&b.to_le_bytes());
    StreamRng::from_seed(key)
}

/// Generator for ad hoc use (tests, examples) seeded from a single integer.
pub fn from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// FNV-1a over the bytes of `s`; stable across platforms and releases.
pub fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
