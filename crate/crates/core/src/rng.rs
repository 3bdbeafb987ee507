//! Seeded generators, one independent stream per pipeline stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stages that own their own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Init,
    Batching,
    Pretrain,
    Consent,
    Evaluation,
}

impl Stage {
    fn offset(self) -> u64 {
        match self {
            Stage::Data => 0x0d47_a000,
            Stage::Init => 0x1417_b000,
            Stage::Batching => 0xba7c_c000,
            Stage::Pretrain => 0x9e7a_d000,
            Stage::Consent => 0xc025_e000,
            Stage::Evaluation => 0xe7a1_f000,
        }
    }

    fn stream(self) -> u64 {
        self.offset() >> 12
    }
}

/// Derives a stage seed from a master seed by a fixed labeled offset.
pub fn derive_seed(master: u64, stage: Stage) -> u64 {
    splitmix64(master.wrapping_add(stage.offset()))
}

/// Generator for `stage`, seeded directly with `seed`.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage.stream());
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
