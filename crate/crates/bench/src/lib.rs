//! Shared inputs for the criterion benchmarks in `benches/`.

use estf_core::ssm::{AttentionParams, SsmConfig, SsmParams};
use estf_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const D_MODEL: usize = 8;

/// Block parameters and a `[1, t, D_MODEL]` input, all from one seed.
pub fn fixture(t: usize, cfg: &SsmConfig) -> (SsmParams, AttentionParams, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ssm = SsmParams::init(D_MODEL, cfg, &mut rng);
    let attn = AttentionParams::init(D_MODEL, &mut rng);
    let x = Tensor::uniform(&[1, t, D_MODEL], 1.0, &mut rng);
    (ssm, attn, x)
}
