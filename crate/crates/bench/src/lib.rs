//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tumorsynth::dataset::{healthy_patches, sphere_mask, PhantomSetConfig};
use tumorsynth::diffusion::{standard_normal, ConditionBundle, Denoiser, DenoiserConfig};
use tumorsynth::nn::Tensor;
use tumorsynth::text::HashingEncoder;
use tumorsynth::volume::{Dims, TumorMask, Volume};
use tumorsynth::Organ;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Input, weight and bias for a `c_in -> c_out` 3x3x3 convolution on an `n^3` grid.
pub fn conv_operands(c_in: usize, c_out: usize, n: usize) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(1);
    (
        standard_normal(&mut r, &[c_in, n, n, n]),
        standard_normal(&mut r, &[c_out, c_in, 3, 3, 3]),
        standard_normal(&mut r, &[c_out]),
    )
}

/// Denoiser with the default architecture and a conditioned 8^3 latent.
pub fn denoiser_inputs() -> (Denoiser, Tensor, ConditionBundle) {
    let cfg = DenoiserConfig::default();
    let model = Denoiser::new(cfg.clone()).expect("default config is valid");
    let mut r = rng(2);
    let c = cfg.latent_channels;
    let m = sphere_mask(Dims::cube(8), 2.5);
    let cond = ConditionBundle {
        z_healthy: standard_normal(&mut r, &[c, 8, 8, 8]),
        text: HashingEncoder::new(cfg.text_dim)
            .and_then(|e| e.embed("a hypodense lesion in the liver"))
            .expect("embedding"),
        mask_latent: Tensor::new(vec![1, 8, 8, 8], m.data().iter().map(|&b| b as f64).collect()),
        t: 100,
    };
    (model, standard_normal(&mut r, &[c, 8, 8, 8]), cond)
}

/// Healthy phantom patch of side `n` with a centred spherical tumor mask.
pub fn tumor_patch(n: usize) -> (Volume, TumorMask) {
    let cfg = PhantomSetConfig {
        patch: n,
        volume: n.max(32),
        ..PhantomSetConfig::default()
    };
    let v = healthy_patches(&cfg, Organ::Liver, 1, 3).expect("phantom").remove(0);
    let m = sphere_mask(v.dims(), n as f64 / 4.0);
    (v, m)
}
