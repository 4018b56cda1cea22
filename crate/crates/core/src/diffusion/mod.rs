//! Latent diffusion: noise schedule, conditional denoiser, training loss and
//! masked tumor synthesis.

mod model;
mod schedule;

pub use model::{
    downsample_mask, pool_mask_tensor, sinusoidal_embedding, ConditionBundle, Denoiser, DenoiserConfig,
    DenoiserVars, LatentStats,
};
pub use schedule::{
    build_schedule, estimate_z0, forward_noise, noise_mse, reverse_step, standard_normal, NoiseSchedule,
    SamplerMode, ScheduleConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, LatentTensor};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, Tensor, Var};
use crate::text::{DescriptorSet, HashingEncoder, ReportVariantSet, TextEmbedding};
use crate::volume::{check_aligned, TumorMask, Volume};

/// A tumor-bearing training patch with its report variants.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub id: String,
    /// Normalized patch.
    pub volume: Volume,
    pub mask: TumorMask,
    pub descriptor: DescriptorSet,
    pub variants: ReportVariantSet,
}

/// A training item after encoding, in standardized latent units.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub id: String,
    pub z0: Tensor,
    pub z_healthy: Tensor,
    pub mask_latent: Tensor,
    pub terms: Vec<String>,
    pub embeddings: Vec<TextEmbedding>,
}

/// Encodes every item; statistics are computed from these latents when `stats` is None.
pub fn prepare_samples(
    ae: &Autoencoder,
    items: &[TrainingItem],
    encoder: &HashingEncoder,
    stats: Option<&LatentStats>,
) -> Result<(Vec<LatentSample>, LatentStats)> {
    if items.is_empty() {
        return Err(Error::Invalid("no training items".into()));
    }
    let f = ae.config().downsample;
    let mut raw = Vec::with_capacity(items.len());
    for it in items {
        check_aligned(&it.volume, &it.mask)?;
        if it.mask.is_empty() {
            return Err(Error::EmptyMask(format!("training item {} has no tumor voxels", it.id)));
        }
        let z0 = ae.encode(&it.volume)?.data;
        let zh = ae.encode(&it.volume.masked_out(&it.mask)?)?.data;
        raw.push((z0, zh));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => LatentStats::compute(&raw.iter().flat_map(|(a, b)| [a, b]).collect::<Vec<_>>())?,
    };
    let mut out = Vec::with_capacity(items.len());
    for (it, (z0, zh)) in items.iter().zip(raw) {
        let embeddings = it
            .variants
            .variants
            .iter()
            .map(|v| encoder.embed(v))
            .collect::<Result<Vec<_>>>()?;
        if embeddings.is_empty() {
            return Err(Error::Invalid(format!("item {} has no report variants", it.id)));
        }
        out.push(LatentSample {
            id: it.id.clone(),
            z0: stats.standardize(&z0),
            z_healthy: stats.standardize(&zh),
            mask_latent: downsample_mask(&it.mask, f)?,
            terms: it.descriptor.terms.clone(),
            embeddings,
        });
    }
    Ok((out, stats))
}

/// Random quantities of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmDraw {
    pub t: usize,
    pub eps: Tensor,
    pub variant: usize,
}

impl LdmDraw {
    pub fn sample<R: Rng + ?Sized>(s: &LatentSample, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        LdmDraw {
            t: rng.random_range(1..=schedule.steps()),
            eps: standard_normal(rng, &s.z0.shape),
            variant: rng.random_range(0..s.embeddings.len()),
        }
    }
}

/// `mse(eps, eps_theta(z_t, t, z_healthy, text, m))` on the tape.
pub fn ldm_loss_graph(
    g: &mut Graph,
    p: &Bound,
    model: &Denoiser,
    sample: &LatentSample,
    draw: &LdmDraw,
    schedule: &NoiseSchedule,
) -> Result<(Var, DenoiserVars)> {
    let z_t = forward_noise(&sample.z0, draw.t, &draw.eps, schedule)?;
    let cond = ConditionBundle {
        z_healthy: sample.z_healthy.clone(),
        text: sample.embeddings[draw.variant].clone(),
        mask_latent: sample.mask_latent.clone(),
        t: draw.t,
    };
    let z = g.constant(z_t);
    let vars = model.forward_graph(g, p, z, &cond)?;
    let eps = g.constant(draw.eps.clone());
    Ok((g.mse(vars.eps_hat, eps), vars))
}

/// Mean loss over a batch without gradients.
pub fn ldm_loss<R: Rng + ?Sized>(
    model: &Denoiser,
    batch: &[LatentSample],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let draw = LdmDraw::sample(s, schedule, rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let (l, _) = ldm_loss_graph(&mut g, &p, model, s, &draw, schedule)?;
        total += g.value(l).item();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub text: String,
    pub mask_hash: String,
    pub schedule_hash: String,
    pub sampler: SamplerMode,
}

pub fn mask_hash(m: &TumorMask) -> String {
    let mut shape = Vec::new();
    m.dims().as_array().iter().for_each(|n| shape.extend((*n as u64).to_le_bytes()));
    crate::digest::sha256_hex(&[&shape, m.data()])
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub volume: Volume,
    pub provenance: Provenance,
}

/// Inference bundle: autoencoder, denoiser and sampler settings.
#[derive(Debug, Clone)]
pub struct Synthesizer<'a> {
    ae: &'a Autoencoder,
    denoiser: &'a Denoiser,
    stats: &'a LatentStats,
    schedule: NoiseSchedule,
    encoder: HashingEncoder,
    mode: SamplerMode,
}

impl<'a> Synthesizer<'a> {
    pub fn new(ae: &'a Autoencoder, denoiser: &'a Denoiser) -> Result<Self> {
        let stats = denoiser
            .latent_stats()
            .ok_or_else(|| Error::NotReady("denoiser has no trained latent statistics".into()))?;
        if ae.config().latent_channels != denoiser.config().latent_channels {
            return Err(Error::Shape("autoencoder and denoiser disagree on latent channels".into()));
        }
        Ok(Synthesizer {
            ae,
            denoiser,
            stats,
            schedule: denoiser.config().schedule.build()?,
            encoder: HashingEncoder::new(denoiser.config().text_dim)?,
            mode: SamplerMode::Ancestral,
        })
    }

    pub fn with_mode(mut self, mode: SamplerMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn encoder(&self) -> &HashingEncoder {
        &self.encoder
    }

    /// Conditioning at timestep `t` for a healthy patch, mask and report.
    pub fn condition(&self, x_healthy: &Volume, m: &TumorMask, text: &str, t: usize) -> Result<ConditionBundle> {
        check_aligned(x_healthy, m)?;
        let zh = self.ae.encode(&x_healthy.masked_out(m)?)?;
        Ok(ConditionBundle {
            z_healthy: self.stats.standardize(&zh.data),
            text: self.encoder.embed(text)?,
            mask_latent: downsample_mask(m, self.ae.config().downsample)?,
            t,
        })
    }

    /// Reverse loop from pure noise; returns the standardized `z0` estimate.
    pub fn sample_latent<R: Rng + ?Sized>(&self, cond: &ConditionBundle, rng: &mut R) -> Result<Tensor> {
        let mut cond = cond.clone();
        let mut z = standard_normal(rng, &cond.z_healthy.shape);
        for t in (1..=self.schedule.steps()).rev() {
            cond.t = t;
            let eps_hat = self.denoiser.predict_noise(&z, &cond)?;
            z = reverse_step(&z, &eps_hat, t, &self.schedule, self.mode, rng)?;
        }
        if !z.is_finite() {
            return Err(Error::Numeric("sampled latent is not finite".into()));
        }
        Ok(z)
    }

    pub fn decode_latent(&self, z: &Tensor, like: &Volume) -> Result<Volume> {
        let lt = LatentTensor {
            data: self.stats.unstandardize(z),
            factor: self.ae.config().downsample,
            source_shape: like.dims(),
            source_spacing: like.spacing(),
        };
        let q = self.ae.quantize(&lt)?;
        self.ae.decode(&q.z_q)
    }

    pub fn synthesize_with_rng<R: Rng + ?Sized>(
        &self,
        x_healthy: &Volume,
        m: &TumorMask,
        report_text: &str,
        rng: &mut R,
    ) -> Result<Volume> {
        if !x_healthy.is_normalized() {
            return Err(Error::Contract("healthy patch must be normalized".into()));
        }
        let cond = self.condition(x_healthy, m, report_text, self.schedule.steps())?;
        if m.is_empty() {
            return Ok(x_healthy.clone());
        }
        let z = self.sample_latent(&cond, rng)?;
        let decoded = self.decode_latent(&z, x_healthy)?;
        composite(x_healthy, &decoded, m)
    }

    /// Seeded synthesis with a provenance record.
    pub fn synthesize(&self, x_healthy: &Volume, m: &TumorMask, report_text: &str, seed: u64) -> Result<Synthesis> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let volume = self.synthesize_with_rng(x_healthy, m, report_text, &mut rng)?;
        Ok(Synthesis {
            volume,
            provenance: Provenance {
                seed,
                text: report_text.to_owned(),
                mask_hash: mask_hash(m),
                schedule_hash: self.schedule.hash(),
                sampler: self.mode,
            },
        })
    }
}

/// `m * generated + (1 - m) * healthy`, voxel-exact outside the mask.
pub fn composite(healthy: &Volume, generated: &Volume, m: &TumorMask) -> Result<Volume> {
    check_aligned(healthy, m)?;
    check_aligned(generated, m)?;
    let data = healthy
        .data()
        .iter()
        .zip(generated.data())
        .zip(m.data())
        .map(|((h, g), &k)| if k != 0 { *g } else { *h })
        .collect();
    Volume::new(data, healthy.dims(), healthy.spacing(), healthy.is_normalized())
}

/// Free-function form of [`Synthesizer::synthesize_with_rng`].
pub fn synthesize_tumor<R: Rng + ?Sized>(
    x_healthy: &Volume,
    m: &TumorMask,
    report_text: &str,
    ae: &Autoencoder,
    denoiser: &Denoiser,
    rng: &mut R,
) -> Result<Volume> {
    Synthesizer::new(ae, denoiser)?.synthesize_with_rng(x_healthy, m, report_text, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::nn::{gradcheck, Checkpoint};
    use crate::text::embed_text;
    use crate::volume::{Dims, Spacing};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 2,
            width: 6,
            bottleneck_width: 8,
            time_dim: 8,
            text_dim: 32,
            text_tokens: 4,
            attn_dim: 4,
            schedule: ScheduleConfig {
                steps: 10,
                ..ScheduleConfig::default()
            },
            seed: 5,
        }
    }

    fn tiny_ae() -> Autoencoder {
        Autoencoder::new(AeConfig {
            downsample: 2,
            latent_channels: 2,
            codebook_size: 8,
            widths: vec![4, 4],
            res_blocks: 1,
            ..AeConfig::default()
        })
        .unwrap()
    }

    fn cond(seed: u64, text: &str, cfg: &DenoiserConfig, n: usize) -> (Tensor, ConditionBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.latent_channels;
        let mut mask = Tensor::zeros(&[1, n, n, n]);
        mask.data[..n * n].iter_mut().for_each(|v| *v = 1.0);
        let text = crate::text::HashingEncoder::new(cfg.text_dim).unwrap().embed(text).unwrap();
        (
            standard_normal(&mut rng, &[c, n, n, n]),
            ConditionBundle {
                z_healthy: standard_normal(&mut rng, &[c, n, n, n]),
                text,
                mask_latent: mask,
                t: 7,
            },
        )
    }

    #[test]
    fn output_shape_and_determinism() {
        let d = Denoiser::new(DenoiserConfig::default()).unwrap();
        let (z, mut c) = cond(1, "a hypodense lesion", d.config(), 8);
        c.text = embed_text("a hypodense lesion").unwrap();
        let a = d.predict_noise(&z, &c).unwrap();
        assert_eq!(a.shape, vec![4, 8, 8, 8]);
        assert_eq!(a, d.predict_noise(&z, &c).unwrap());
    }

    #[test]
    fn bundle_validation() {
        let d = Denoiser::new(tiny_cfg()).unwrap();
        let (z, c) = cond(1, "x", d.config(), 4);
        let mut bad = c.clone();
        bad.t = 0;
        assert!(d.predict_noise(&z, &bad).is_err());
        bad = c.clone();
        bad.t = 11;
        assert!(d.predict_noise(&z, &bad).is_err());
        bad = c.clone();
        bad.mask_latent = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(d.predict_noise(&z, &bad), Err(Error::Shape(_))));
        assert!(matches!(d.predict_noise(&Tensor::zeros(&[3, 4, 4, 4]), &c), Err(Error::Shape(_))));
    }

    #[test]
    fn text_sensitivity_follows_cross_attention() {
        let mut d = Denoiser::new(tiny_cfg()).unwrap();
        let (z, a) = cond(2, "a hypodense lesion in the liver", d.config(), 4);
        let (_, b) = cond(2, "a hyperenhancing lesion in the liver", d.config(), 4);
        let diff = |d: &Denoiser| {
            let x = d.predict_noise(&z, &a).unwrap();
            let y = d.predict_noise(&z, &b).unwrap();
            x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
        };
        assert!(diff(&d) > 0.0);
        d.zero_cross_attention();
        assert_eq!(diff(&d), 0.0);
    }

    #[test]
    fn ldm_gradient_matches_finite_differences() {
        let mut d = Denoiser::new(tiny_cfg()).unwrap();
        let schedule = d.config().schedule.build().unwrap();
        let (z0, c) = cond(3, "a cystic lesion", d.config(), 8);
        let sample = LatentSample {
            id: "s".into(),
            z0,
            z_healthy: c.z_healthy.clone(),
            mask_latent: c.mask_latent.clone(),
            terms: vec![],
            embeddings: vec![c.text.clone()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draw = LdmDraw::sample(&sample, &schedule, &mut rng);
        let probe = d.clone();
        let check = gradcheck(d.params_mut(), 16, 1e-6, &mut rng, |store, want| {
            let mut m = probe.clone();
            *m.params_mut() = store.clone();
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, want);
            let (l, _) = ldm_loss_graph(&mut g, &p, &m, &sample, &draw, &schedule).unwrap();
            (g.value(l).item(), want.then(|| p.grads(m.params(), &g.backward(l))))
        });
        assert!(check.max_rel_error < 1e-3, "{:?}", check.probes);
    }

    fn healthy(n: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * n * n).map(|_| rng.random_range(0.3f32..0.7)).collect();
        Volume::new(data, Dims::cube(n), Spacing::ISOTROPIC_1MM, true).unwrap()
    }

    #[test]
    fn synthesis_requires_stats_and_preserves_outside() {
        let ae = tiny_ae();
        let mut d = Denoiser::new(tiny_cfg()).unwrap();
        let x = healthy(8, 1);
        let m = TumorMask::from_fn(Dims::cube(8), |z, y, x| (2..5).contains(&z) && (3..6).contains(&y) && x < 4);
        assert!(matches!(Synthesizer::new(&ae, &d), Err(Error::NotReady(_))));
        d.set_latent_stats(LatentStats::identity(2)).unwrap();
        let s = Synthesizer::new(&ae, &d).unwrap();
        let out = s.synthesize(&x, &m, "a hypodense lesion", 9).unwrap();
        for i in 0..x.data().len() {
            if m.data()[i] == 0 {
                assert_eq!(out.volume.data()[i].to_bits(), x.data()[i].to_bits());
            }
        }
        assert_eq!(out.provenance.mask_hash, mask_hash(&m));
        let again = s.synthesize(&x, &m, "a hypodense lesion", 9).unwrap();
        assert_eq!(again.volume, out.volume);
        let empty = s.synthesize(&x, &TumorMask::empty(x.dims()), "a hypodense lesion", 9).unwrap();
        assert_eq!(empty.volume, x);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut d = Denoiser::new(tiny_cfg()).unwrap();
        d.set_latent_stats(LatentStats {
            mean: vec![0.1, 0.2],
            sd: vec![1.5, 0.5],
        })
        .unwrap();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&d.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.latent_stats(), d.latent_stats());
        assert_eq!(back.config(), d.config());
        let mut ck = d.checkpoint();
        ck.config["arch_hash"] = serde_json::json!("0");
        assert!(matches!(Denoiser::from_checkpoint(&ck), Err(Error::Corruption(_))));
    }

    #[test]
    fn mask_downsample_is_any_coverage() {
        let m = TumorMask::from_indices(Dims::cube(8), [Dims::cube(8).index(3, 3, 3)]);
        let t = downsample_mask(&m, 4).unwrap();
        assert_eq!(t.shape, vec![1, 2, 2, 2]);
        assert_eq!(t.data, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(downsample_mask(&m, 3).is_err());
    }

    #[test]
    fn latent_stats_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = standard_normal(&mut rng, &[3, 2, 2, 2]);
        let s = LatentStats::compute(&[&a]).unwrap();
        let z = s.standardize(&a);
        let back = s.unstandardize(&z);
        assert!(a.data.iter().zip(&back.data).all(|(p, q)| (p - q).abs() < 1e-12));
        let per = 8;
        for ch in 0..3 {
            let m: f64 = z.data[ch * per..(ch + 1) * per].iter().sum::<f64>() / per as f64;
            assert!(m.abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn composite_is_exact_outside_mask(seed in 0u64..500, bits in proptest::collection::vec(any::<bool>(), 64)) {
            let x = healthy(4, seed);
            let gen = healthy(4, seed + 1);
            let m = TumorMask::from_indices(Dims::cube(4), bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i));
            let out = composite(&x, &gen, &m).unwrap();
            for i in 0..64 {
                let want = if bits[i] { gen.data()[i] } else { x.data()[i] };
                prop_assert_eq!(out.data()[i].to_bits(), want.to_bits());
            }
        }
    }
}
