use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::ScheduleConfig;
use crate::autoencoder::LatentTensor;
use crate::error::{Error, Result};
use crate::nn::{Bound, Checkpoint, Conv3d, Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::text::TextEmbedding;
use crate::volume::TumorMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channel width at latent resolution and at the half-resolution bottleneck.
    pub width: usize,
    pub bottleneck_width: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    /// The text vector is split into this many attention tokens.
    pub text_tokens: usize,
    pub attn_dim: usize,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            width: 32,
            bottleneck_width: 64,
            time_dim: 32,
            text_dim: crate::text::DEFAULT_EMBED_DIM,
            text_tokens: 8,
            attn_dim: 16,
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.latent_channels, self.width, self.bottleneck_width, self.attn_dim, self.text_tokens]
            .contains(&0)
        {
            return Err(Error::Invalid("denoiser sizes must be >= 1".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Invalid("time_dim must be even and >= 2".into()));
        }
        if !self.text_dim.is_multiple_of(self.text_tokens) {
            return Err(Error::Invalid(format!(
                "text_dim {} not divisible into {} tokens",
                self.text_dim, self.text_tokens
            )));
        }
        self.schedule.build().map(|_| ())
    }

    pub fn arch_hash(&self) -> String {
        let arch = DenoiserConfig {
            seed: 0,
            schedule: ScheduleConfig::default(),
            ..self.clone()
        };
        crate::digest::sha256_hex(&[&serde_json::to_vec(&arch).expect("config serializes")])
    }
}

/// Per-channel standardization applied to encoder outputs before diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        LatentStats {
            mean: vec![0.0; channels],
            sd: vec![1.0; channels],
        }
    }

    pub fn compute(latents: &[&Tensor]) -> Result<Self> {
        let first = latents.first().ok_or_else(|| Error::Invalid("no latents to standardize".into()))?;
        let c = first.shape[0];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for z in latents {
            if z.shape[0] != c {
                return Err(Error::Shape("latents disagree on channel count".into()));
            }
            let per = z.numel() / c;
            for ch in 0..c {
                for v in &z.data[ch * per..(ch + 1) * per] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += per;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let sd = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(LatentStats { mean, sd })
    }

    fn apply(&self, z: &Tensor, forward: bool) -> Tensor {
        let c = z.shape[0];
        let per = z.numel() / c;
        let data = z
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i / per;
                if forward {
                    (v - self.mean[ch]) / self.sd[ch]
                } else {
                    v * self.sd[ch] + self.mean[ch]
                }
            })
            .collect();
        Tensor::new(z.shape.clone(), data)
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        self.apply(z, true)
    }

    pub fn unstandardize(&self, z: &Tensor) -> Tensor {
        self.apply(z, false)
    }
}

/// Any-coverage pooling of a voxel mask by `factor`, as `[1, d, h, w]` of 0/1.
pub fn downsample_mask(m: &TumorMask, factor: usize) -> Result<Tensor> {
    let dims = m.dims();
    if factor == 0 || dims.as_array().iter().any(|n| n % factor != 0) {
        return Err(Error::Shape(format!("mask {dims} not divisible by {factor}")));
    }
    let [d, h, w] = dims.as_array().map(|n| n / factor);
    let mut out = vec![0.0; d * h * w];
    for i in m.indices() {
        let [z, y, x] = dims.coords(i);
        out[((z / factor) * h + y / factor) * w + x / factor] = 1.0;
    }
    Ok(Tensor::new(vec![1, d, h, w], out))
}

/// Same pooling on an already-downsampled `[1, d, h, w]` mask.
pub fn pool_mask_tensor(m: &Tensor, factor: usize) -> Result<Tensor> {
    let [_, d, h, w] = [m.shape[0], m.shape[1], m.shape[2], m.shape[3]];
    if [d, h, w].iter().any(|n| n % factor != 0) {
        return Err(Error::Shape(format!("latent mask {:?} not divisible by {factor}", m.shape)));
    }
    let (od, oh, ow) = (d / factor, h / factor, w / factor);
    let mut out = vec![0.0; od * oh * ow];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if m.data[(z * h + y) * w + x] > 0.0 {
                    out[((z / factor) * oh + y / factor) * ow + x / factor] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::new(vec![1, od, oh, ow], out))
}

/// Everything the denoiser sees besides `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// Standardized latent of the tumor-free input.
    pub z_healthy: Tensor,
    pub text: TextEmbedding,
    /// `[1, d, h, w]`, matching `z_healthy`'s spatial shape.
    pub mask_latent: Tensor,
    pub t: usize,
}

impl ConditionBundle {
    pub fn validate(&self, z_t: &Tensor, cfg: &DenoiserConfig) -> Result<()> {
        if z_t.shape.len() != 4 || z_t.shape[0] != cfg.latent_channels {
            return Err(Error::Shape(format!(
                "noisy latent {:?} does not have {} channels",
                z_t.shape, cfg.latent_channels
            )));
        }
        if self.z_healthy.shape != z_t.shape {
            return Err(Error::Shape(format!(
                "healthy latent {:?} vs noisy latent {:?}",
                self.z_healthy.shape, z_t.shape
            )));
        }
        if self.mask_latent.shape[..] != [1, z_t.shape[1], z_t.shape[2], z_t.shape[3]] {
            return Err(Error::Shape(format!("latent mask {:?} vs latent {:?}", self.mask_latent.shape, z_t.shape)));
        }
        if z_t.shape[1..].iter().any(|n| n % 2 != 0) {
            return Err(Error::Shape(format!("latent spatial shape {:?} must be even", &z_t.shape[1..])));
        }
        if self.text.vector.len() != cfg.text_dim {
            return Err(Error::Shape(format!(
                "text embedding has {} dims, denoiser expects {}",
                self.text.vector.len(),
                cfg.text_dim
            )));
        }
        if self.t == 0 || self.t > cfg.schedule.steps {
            return Err(Error::Invalid(format!("timestep {} outside 1..={}", self.t, cfg.schedule.steps)));
        }
        Ok(())
    }
}

pub fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![1, dim], out)
}

#[derive(Debug, Clone, Copy)]
struct TimeResBlock {
    c1: Conv3d,
    c2: Conv3d,
    temb: Linear,
}

impl TimeResBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize, hidden: usize) -> Self {
        TimeResBlock {
            c1: Conv3d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1.0),
            c2: Conv3d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 0.3),
            temb: Linear::new(store, rng, &format!("{name}.temb"), hidden, ch, true, 1.0),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, temb: Var) -> Var {
        let h = g.silu(x);
        let h = self.c1.forward(g, p, h);
        let tb = self.temb.forward(g, p, temb);
        let ch = g.shape(tb)[1];
        let tb = g.reshape(tb, &[ch]);
        let h = g.add_channel(h, tb);
        let h = g.silu(h);
        let h = self.c2.forward(g, p, h);
        g.add(x, h)
    }
}

/// Spatial positions attend over text tokens; optional mask-scaled logit bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CrossAttention {
    q: Linear,
    k: Linear,
    pub(crate) v: Linear,
    pub(crate) o: Linear,
    mask_bias: Option<ParamId>,
}

impl CrossAttention {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
        cfg: &DenoiserConfig,
        with_mask: bool,
    ) -> Self {
        let tok = cfg.text_dim / cfg.text_tokens;
        CrossAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), ch, cfg.attn_dim, false, 1.0),
            k: Linear::new(store, rng, &format!("{name}.k"), tok, cfg.attn_dim, false, 1.0),
            // token entries are small (unit-norm vector spread over many tokens)
            v: Linear::new(store, rng, &format!("{name}.v"), tok, ch, false, 4.0),
            o: Linear::new(store, rng, &format!("{name}.o"), ch, ch, false, 1.0),
            mask_bias: with_mask.then(|| {
                store.add(format!("{name}.mask_bias"), crate::nn::init_uniform(rng, &[cfg.text_tokens], 1, 0.5))
            }),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, tokens: Var, mask: Option<Var>, attn_dim: usize) -> Var {
        let shape = g.shape(x).to_vec();
        let c = shape[0];
        let s: usize = shape[1..].iter().product();
        let flat = g.reshape(x, &[c, s]);
        let rows = g.transpose(flat);
        let q = self.q.forward(g, p, rows);
        let k = self.k.forward(g, p, tokens);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let mut logits = g.scale(logits, 1.0 / (attn_dim as f64).sqrt());
        if let (Some(m), Some(b)) = (mask, self.mask_bias) {
            let bias = g.outer(m, p.var(b));
            logits = g.add(logits, bias);
        }
        let attn = g.softmax_rows(logits);
        let v = self.v.forward(g, p, tokens);
        let mixed = g.matmul(attn, v);
        let out = self.o.forward(g, p, mixed);
        let out = g.transpose(out);
        let out = g.reshape(out, &shape);
        g.add(x, out)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    t1: Linear,
    conv_in: Conv3d,
    res_hi: TimeResBlock,
    attn_hi: CrossAttention,
    down: Conv3d,
    res_mid1: TimeResBlock,
    attn_mid: CrossAttention,
    res_mid2: TimeResBlock,
    up: Conv3d,
    merge: Conv3d,
    res_up: TimeResBlock,
    attn_up: CrossAttention,
    conv_out: Conv3d,
}

/// Time-conditional 3D U-Net predicting the noise in a standardized latent.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    arch: Arch,
    stats: Option<LatentStats>,
}

/// Graph handles from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserVars {
    pub eps_hat: Var,
    /// Post-attention bottleneck activations `[Cb, d/2, h/2, w/2]`.
    pub bottleneck: Var,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1ff_0500);
        let mut st = ParamStore::new();
        let (c, w, wb) = (cfg.latent_channels, cfg.width, cfg.bottleneck_width);
        let hidden = 2 * cfg.time_dim;
        let arch = Arch {
            t1: Linear::new(&mut st, &mut rng, "time.fc", cfg.time_dim, hidden, true, 1.0),
            conv_in: Conv3d::new(&mut st, &mut rng, "in", 2 * c + 1, w, 3, 1, 1.0),
            res_hi: TimeResBlock::new(&mut st, &mut rng, "hi.res", w, hidden),
            attn_hi: CrossAttention::new(&mut st, &mut rng, "hi.attn", w, &cfg, false),
            down: Conv3d::new(&mut st, &mut rng, "down", w, wb, 3, 2, 1.0),
            res_mid1: TimeResBlock::new(&mut st, &mut rng, "mid.res1", wb, hidden),
            attn_mid: CrossAttention::new(&mut st, &mut rng, "mid.attn", wb, &cfg, true),
            res_mid2: TimeResBlock::new(&mut st, &mut rng, "mid.res2", wb, hidden),
            up: Conv3d::new(&mut st, &mut rng, "up", wb, w, 3, 1, 1.0),
            merge: Conv3d::new(&mut st, &mut rng, "merge", 2 * w, w, 1, 1, 1.0),
            res_up: TimeResBlock::new(&mut st, &mut rng, "up.res", w, hidden),
            attn_up: CrossAttention::new(&mut st, &mut rng, "up.attn", w, &cfg, false),
            conv_out: Conv3d::new(&mut st, &mut rng, "out", w, c, 3, 1, 0.5),
        };
        Ok(Denoiser {
            cfg,
            params: st,
            arch,
            stats: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_stats(&self) -> Option<&LatentStats> {
        self.stats.as_ref()
    }

    /// Attaching statistics marks the model usable for synthesis.
    pub fn set_latent_stats(&mut self, stats: LatentStats) -> Result<()> {
        if stats.mean.len() != self.cfg.latent_channels || stats.sd.len() != self.cfg.latent_channels {
            return Err(Error::Shape("latent statistics do not match channel count".into()));
        }
        self.stats = Some(stats);
        Ok(())
    }

    /// Zeroes value and output projections of every cross-attention layer.
    pub fn zero_cross_attention(&mut self) {
        for a in [self.arch.attn_hi, self.arch.attn_mid, self.arch.attn_up] {
            for id in [a.v.w, a.o.w] {
                self.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn text_tokens(&self, g: &mut Graph, text: &TextEmbedding) -> Var {
        let n = self.cfg.text_tokens;
        let tok = self.cfg.text_dim / n;
        g.constant(Tensor::new(vec![n, tok], text.vector.clone()))
    }

    /// Builds the forward pass on `g`. `z_t` must hold a `[C, d, h, w]` tensor.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, z_t: Var, cond: &ConditionBundle) -> Result<DenoiserVars> {
        cond.validate(g.value(z_t), &self.cfg)?;
        let a = &self.arch;
        let te = g.constant(sinusoidal_embedding(cond.t, self.cfg.time_dim));
        let te = a.t1.forward(g, p, te);
        let te = g.silu(te);
        let tokens = self.text_tokens(g, &cond.text);
        let zh = g.constant(cond.z_healthy.clone());
        let ml = g.constant(cond.mask_latent.clone());
        let mid_mask = pool_mask_tensor(&cond.mask_latent, 2)?;
        let mid_mask = g.constant(Tensor::new(vec![mid_mask.numel()], mid_mask.data));
        let x = g.concat(&[z_t, zh, ml]);
        let h = a.conv_in.forward(g, p, x);
        let h = a.res_hi.forward(g, p, h, te);
        let skip = a.attn_hi.forward(g, p, h, tokens, None, self.cfg.attn_dim);
        let h = a.down.forward(g, p, skip);
        let h = a.res_mid1.forward(g, p, h, te);
        let bottleneck = a.attn_mid.forward(g, p, h, tokens, Some(mid_mask), self.cfg.attn_dim);
        let h = a.res_mid2.forward(g, p, bottleneck, te);
        let h = g.upsample(h, 2);
        let h = a.up.forward(g, p, h);
        let h = g.concat(&[h, skip]);
        let h = a.merge.forward(g, p, h);
        let h = a.res_up.forward(g, p, h, te);
        let h = a.attn_up.forward(g, p, h, tokens, None, self.cfg.attn_dim);
        let h = g.silu(h);
        let eps_hat = a.conv_out.forward(g, p, h);
        Ok(DenoiserVars { eps_hat, bottleneck })
    }

    /// `eps_hat = eps_theta(z_t, t, z_healthy, text, m)`.
    pub fn predict_noise(&self, z_t: &Tensor, cond: &ConditionBundle) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(z_t.clone());
        let out = self.forward_graph(&mut g, &p, z, cond)?;
        Ok(g.value(out.eps_hat).clone())
    }

    pub fn predict_noise_latent(&self, z_t: &LatentTensor, cond: &ConditionBundle) -> Result<LatentTensor> {
        Ok(z_t.with_data(self.predict_noise(&z_t.data, cond)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({
                "kind": "denoiser",
                "config": self.cfg,
                "arch_hash": self.cfg.arch_hash(),
                "latent_stats": self.stats,
            }),
            arrays: self.params.named_arrays(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("denoiser") {
            return Err(Error::Format("checkpoint is not a denoiser".into()));
        }
        let cfg: DenoiserConfig = serde_json::from_value(ck.config["config"].clone())
            .map_err(|e| Error::Format(format!("denoiser config: {e}")))?;
        if ck.config.get("arch_hash").and_then(|h| h.as_str()) != Some(cfg.arch_hash().as_str()) {
            return Err(Error::Corruption("denoiser architecture hash mismatch".into()));
        }
        let stats: Option<LatentStats> = serde_json::from_value(ck.config["latent_stats"].clone())
            .map_err(|e| Error::Format(format!("latent stats: {e}")))?;
        let mut d = Denoiser::new(cfg)?;
        d.params.load_from(&ck.arrays)?;
        if !d.params.all_finite() {
            return Err(Error::Corruption("denoiser weights are not finite".into()));
        }
        d.stats = stats;
        Ok(d)
    }
}
