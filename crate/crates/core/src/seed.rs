//! Named per-stage seed streams derived from one master seed.
//!
//! Each stage gets its own 64-bit seed by mixing the master seed with a
//! stage constant through SplitMix64, so changing how one stage consumes
//! randomness never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stages that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Mask,
    Gumbel,
    Init,
    Synth,
    Shuffle,
    Split,
    Sample,
    Dropout,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Mask => 1,
            Stage::Gumbel => 2,
            Stage::Init => 3,
            Stage::Synth => 4,
            Stage::Shuffle => 5,
            Stage::Split => 6,
            Stage::Sample => 7,
            Stage::Dropout => 8,
        }
    }
}

/// One SplitMix64 output step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of `stage` under `master`.
pub fn derive_seed(master: u64, stage: Stage) -> u64 {
    splitmix64(master ^ splitmix64(stage.tag()))
}

/// Seed of the `counter`-th draw of `stage`, e.g. one per epoch.
pub fn derive_indexed(master: u64, stage: Stage, counter: u64) -> u64 {
    splitmix64(derive_seed(master, stage) ^ splitmix64(counter.wrapping_add(0x5EED)))
}

pub fn stage_rng(master: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stage))
}
