//! 3D vector-quantized autoencoder: strided-convolution encoder, nearest
//! neighbour codebook with a straight-through estimator, and an
//! upsampling decoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Checkpoint, Conv3d, Graph, ParamId, ParamStore, Tensor, Var};
use crate::volume::{Dims, Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    /// Spatial downsampling factor `f` (power of two).
    pub downsample: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    /// Channel width per resolution level, `log2(f) + 1` entries.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    /// Commitment weight.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Unused codes are re-seeded from encoder outputs this often (0 = never).
    pub dead_code_interval: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            downsample: 4,
            latent_channels: 4,
            codebook_size: 256,
            widths: vec![8, 16, 32],
            res_blocks: 2,
            beta: 0.25,
            lr: 1e-4,
            batch_size: 4,
            dead_code_interval: 50,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::Invalid(format!("downsample {} is not a power of two", self.downsample)));
        }
        if self.widths.len() != self.levels() + 1 {
            return Err(Error::Invalid(format!(
                "downsample {} needs {} widths, got {}",
                self.downsample,
                self.levels() + 1,
                self.widths.len()
            )));
        }
        if self.latent_channels == 0 || self.widths.contains(&0) || self.batch_size == 0 {
            return Err(Error::Invalid("channel counts and batch size must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Invalid("codebook needs at least two entries".into()));
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Invalid("lr must be positive and beta non-negative".into()));
        }
        Ok(())
    }
}

/// Latent grid `[C, D/f, H/f, W/f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub data: Tensor,
    pub factor: usize,
    pub source_shape: Dims,
    pub source_spacing: Spacing,
}

impl LatentTensor {
    pub fn channels(&self) -> usize {
        self.data.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.data.shape[1], self.data.shape[2], self.data.shape[3]]
    }

    pub fn sites(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn with_data(&self, data: Tensor) -> LatentTensor {
        assert_eq!(data.shape, self.data.shape);
        LatentTensor { data, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `[K, C]`.
    pub entries: Tensor,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape[1]
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.entries.data[k * c..(k + 1) * c]
    }

    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        (0..self.len())
            .map(|k| (k, self.entry(k).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqLosses {
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub z_q: LatentTensor,
    /// Code index per latent site, row-major over `[D/f, H/f, W/f]`.
    pub indices: Vec<usize>,
    pub losses: VqLosses,
}

/// Site-major view `[S, C]` of a channel-major `[C, S]` buffer.
fn site_vectors(data: &[f64], c: usize) -> Vec<Vec<f64>> {
    let s = data.len() / c;
    (0..s).map(|i| (0..c).map(|ch| data[ch * s + i]).collect()).collect()
}

/// Snaps every latent site to its nearest codebook entry (squared L2).
pub fn quantize(z: &LatentTensor, cb: &Codebook) -> Result<Quantized> {
    let c = z.channels();
    if c != cb.dim() {
        return Err(Error::Shape(format!("latent has {c} channels, codebook dim {}", cb.dim())));
    }
    let s = z.sites();
    let mut out = vec![0.0; c * s];
    let mut indices = Vec::with_capacity(s);
    let mut dist = 0.0;
    for (i, v) in site_vectors(&z.data.data, c).iter().enumerate() {
        let (k, d) = cb.nearest(v);
        indices.push(k);
        dist += d;
        for (ch, e) in cb.entry(k).iter().enumerate() {
            out[ch * s + i] = *e;
        }
    }
    // Codebook and commitment terms share a forward value; they differ only
    // in which side the gradient stops.
    let per_site = dist / s as f64;
    Ok(Quantized {
        z_q: z.with_data(Tensor::new(z.data.shape.clone(), out)),
        indices,
        losses: VqLosses {
            codebook: per_site,
            commitment: per_site,
        },
    })
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv3d,
    c2: Conv3d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize) -> Self {
        ResBlock {
            c1: Conv3d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1.0),
            c2: Conv3d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 0.3),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = g.silu(x);
        let h = self.c1.forward(g, p, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, p, h);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv3d,
    levels: Vec<(Vec<ResBlock>, Conv3d)>,
    bottom: Vec<ResBlock>,
    conv_out: Conv3d,
}

#[derive(Debug, Clone)]
struct Decoder {
    conv_in: Conv3d,
    bottom: Vec<ResBlock>,
    levels: Vec<(Conv3d, Vec<ResBlock>)>,
    conv_out: Conv3d,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    cfg: AeConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    codebook: ParamId,
    codebook_initialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeStepMetrics {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub metrics: Vec<AeStepMetrics>,
}

impl AeTrainReport {
    pub fn final_reconstruction(&self, window: usize) -> Option<f64> {
        let n = self.metrics.len();
        (n > 0).then(|| {
            let tail = &self.metrics[n.saturating_sub(window)..];
            tail.iter().map(|m| m.reconstruction).sum::<f64>() / tail.len() as f64
        })
    }
}

impl Autoencoder {
    pub fn new(cfg: AeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let w = &cfg.widths;
        let l = cfg.levels();
        let blocks = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, ch: usize| {
            (0..cfg.res_blocks)
                .map(|i| ResBlock::new(store, rng, &format!("{name}.res{i}"), ch))
                .collect::<Vec<_>>()
        };
        let enc_in = Conv3d::new(&mut store, &mut rng, "enc.in", 1, w[0], 3, 1, 1.0);
        let mut enc_levels = Vec::new();
        for i in 0..l {
            let rb = blocks(&mut store, &mut rng, format!("enc.l{i}"), w[i]);
            let down = Conv3d::new(&mut store, &mut rng, &format!("enc.l{i}.down"), w[i], w[i + 1], 3, 2, 1.0);
            enc_levels.push((rb, down));
        }
        let enc_bottom = blocks(&mut store, &mut rng, "enc.bottom".into(), w[l]);
        let enc_out = Conv3d::new(&mut store, &mut rng, "enc.out", w[l], cfg.latent_channels, 3, 1, 1.0);

        let dec_in = Conv3d::new(&mut store, &mut rng, "dec.in", cfg.latent_channels, w[l], 3, 1, 1.0);
        let dec_bottom = blocks(&mut store, &mut rng, "dec.bottom".into(), w[l]);
        let mut dec_levels = Vec::new();
        for i in (0..l).rev() {
            let up = Conv3d::new(&mut store, &mut rng, &format!("dec.l{i}.up"), w[i + 1], w[i], 3, 1, 1.0);
            let rb = blocks(&mut store, &mut rng, format!("dec.l{i}"), w[i]);
            dec_levels.push((up, rb));
        }
        let dec_out = Conv3d::new(&mut store, &mut rng, "dec.out", w[0], 1, 3, 1, 1.0);
        let codebook = store.add(
            "codebook",
            crate::nn::init_uniform(&mut rng, &[cfg.codebook_size, cfg.latent_channels], 1, 1.0),
        );
        Ok(Autoencoder {
            cfg,
            params: store,
            encoder: Encoder {
                conv_in: enc_in,
                levels: enc_levels,
                bottom: enc_bottom,
                conv_out: enc_out,
            },
            decoder: Decoder {
                conv_in: dec_in,
                bottom: dec_bottom,
                levels: dec_levels,
                conv_out: dec_out,
            },
            codebook,
            codebook_initialized: false,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.params.get(self.codebook).clone(),
        }
    }

    fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let e = &self.encoder;
        let mut h = e.conv_in.forward(g, p, x);
        for (blocks, down) in &e.levels {
            for b in blocks {
                h = b.forward(g, p, h);
            }
            h = down.forward(g, p, h);
        }
        for b in &e.bottom {
            h = b.forward(g, p, h);
        }
        let h = g.silu(h);
        e.conv_out.forward(g, p, h)
    }

    fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let d = &self.decoder;
        let mut h = d.conv_in.forward(g, p, z);
        for b in &d.bottom {
            h = b.forward(g, p, h);
        }
        for (up, blocks) in &d.levels {
            h = g.upsample(h, 2);
            h = up.forward(g, p, h);
            for b in blocks {
                h = b.forward(g, p, h);
            }
        }
        let h = g.silu(h);
        d.conv_out.forward(g, p, h)
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        if !x.is_normalized() {
            return Err(Error::Contract("encoder input must be normalized to [0, 1]".into()));
        }
        let f = self.cfg.downsample;
        if x.dims().as_array().iter().any(|n| n % f != 0) {
            return Err(Error::Shape(format!("input {} is not divisible by downsample factor {f}", x.dims())));
        }
        Ok(())
    }

    fn volume_tensor(x: &Volume) -> Tensor {
        let d = x.dims();
        Tensor::new(vec![1, d.d, d.h, d.w], x.to_f64())
    }

    /// `z = E(x)`, before quantization.
    pub fn encode(&self, x: &Volume) -> Result<LatentTensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(Self::volume_tensor(x));
        let z = self.encode_graph(&mut g, &p, xv);
        Ok(LatentTensor {
            data: g.value(z).clone(),
            factor: self.cfg.downsample,
            source_shape: x.dims(),
            source_spacing: x.spacing(),
        })
    }

    pub fn quantize(&self, z: &LatentTensor) -> Result<Quantized> {
        quantize(z, &self.codebook())
    }

    /// `D(z_q)`, clamped to `[0, 1]`.
    pub fn decode(&self, z_q: &LatentTensor) -> Result<Volume> {
        if z_q.channels() != self.cfg.latent_channels || z_q.data.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "latent {:?} does not match {} channels",
                z_q.data.shape, self.cfg.latent_channels
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z_q.data.clone());
        let out = self.decode_graph(&mut g, &p, zv);
        let t = g.value(out);
        let f = self.cfg.downsample;
        let [d, h, w] = z_q.spatial();
        let dims = Dims::new(d * f, h * f, w * f);
        let data = t.data.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        Volume::new(data, dims, z_q.source_spacing, true)
    }

    /// `D(quantize(E(x)))`.
    pub fn reconstruct(&self, x: &Volume) -> Result<Volume> {
        let z = self.encode(x)?;
        let q = self.quantize(&z)?;
        self.decode(&q.z_q)
    }

    /// Training objective for one volume, as a tape node:
    /// `mse(D(z_st), x) + |sg(z) - e|^2 + beta |z - sg(e)|^2`.
    ///
    /// With `frozen`, code assignments and every gradient-stopped value come
    /// from a previous evaluation, so the tape's gradient is the exact
    /// derivative of the returned value (used by gradient checks).
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &Volume,
        frozen: Option<&FrozenAssignment>,
    ) -> Result<(Var, AeLossParts)> {
        self.check_input(x)?;
        let c = self.cfg.latent_channels;
        let xv = g.constant(Self::volume_tensor(x));
        let z = self.encode_graph(g, p, xv);
        let zshape = g.shape(z).to_vec();
        let sites: usize = zshape[1..].iter().product();
        let flat = g.reshape(z, &[c, sites]);
        let tokens = g.transpose(flat);
        let cb = Codebook {
            entries: g.value(p.var(self.codebook)).clone(),
        };
        let indices: Vec<usize> = match frozen {
            Some(f) => f.indices.clone(),
            None => site_vectors(&g.value(z).data, c).iter().map(|v| cb.nearest(v).0).collect(),
        };
        let e = g.gather_rows(p.var(self.codebook), &indices);
        let (tokens_sg, e_sg) = match frozen {
            Some(f) => (g.constant(f.latent.clone()), g.constant(f.codes.clone())),
            None => (g.detach(tokens), g.detach(e)),
        };
        let codebook_loss = g.mse(tokens_sg, e);
        let codebook_loss = g.scale(codebook_loss, c as f64);
        let commit = g.mse(tokens, e_sg);
        let commit = g.scale(commit, c as f64);
        // straight-through: forward value e, gradient of identity w.r.t. z
        let diff = g.sub(e_sg, tokens_sg);
        let st = g.add(tokens, diff);
        let st = g.transpose(st);
        let zq = g.reshape(st, &zshape);
        let recon = self.decode_graph(g, p, zq);
        let rec_loss = g.mse(recon, xv);
        let weighted_commit = g.scale(commit, self.cfg.beta);
        let vq = g.add(codebook_loss, weighted_commit);
        let total = g.add(rec_loss, vq);
        let parts = AeLossParts {
            reconstruction: g.value(rec_loss).item(),
            codebook: g.value(codebook_loss).item(),
            commitment: g.value(commit).item(),
            latent_sites: site_vectors(&g.value(z).data, c),
            frozen: FrozenAssignment {
                indices,
                latent: g.value(tokens_sg).clone(),
                codes: g.value(e_sg).clone(),
            },
        };
        Ok((total, parts))
    }

    fn init_codebook_from(&mut self, sites: &[Vec<f64>], rng: &mut impl Rng) {
        let k = self.cfg.codebook_size;
        let c = self.cfg.latent_channels;
        let mut order: Vec<usize> = (0..sites.len()).collect();
        order.shuffle(rng);
        let entries = self.params.get_mut(self.codebook);
        for code in 0..k {
            let src = &sites[order[code % order.len()]];
            for ch in 0..c {
                let jitter = if code >= order.len() { rng.random_range(-1e-3..1e-3) } else { 0.0 };
                entries.data[code * c + ch] = src[ch] + jitter;
            }
        }
        self.codebook_initialized = true;
    }

    fn reseed_dead_codes(&mut self, usage: &[usize], sites: &[Vec<f64>], rng: &mut impl Rng) -> usize {
        let c = self.cfg.latent_channels;
        let entries = self.params.get_mut(self.codebook);
        let mut reseeded = 0;
        for (code, &n) in usage.iter().enumerate() {
            if n == 0 && !sites.is_empty() {
                let src = &sites[rng.random_range(0..sites.len())];
                for ch in 0..c {
                    entries.data[code * c + ch] = src[ch] + rng.random_range(-1e-3..1e-3);
                }
                reseeded += 1;
            }
        }
        reseeded
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({ "kind": "autoencoder", "config": self.cfg }),
            arrays: self.params.named_arrays(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(|k| k.as_str()) != Some("autoencoder") {
            return Err(Error::Format("checkpoint is not an autoencoder".into()));
        }
        let cfg: AeConfig = serde_json::from_value(ck.config["config"].clone())
            .map_err(|e| Error::Format(format!("autoencoder config: {e}")))?;
        let mut ae = Autoencoder::new(cfg)?;
        ae.params.load_from(&ck.arrays)?;
        ae.codebook_initialized = true;
        Ok(ae)
    }
}

pub struct AeLossParts {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub latent_sites: Vec<Vec<f64>>,
    pub frozen: FrozenAssignment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAssignment {
    pub indices: Vec<usize>,
    /// Gradient-stopped `z` and `e`, site-major `[S, C]`.
    pub latent: Tensor,
    pub codes: Tensor,
}

/// Trains in place; the returned report holds one entry per step.
pub fn train_autoencoder(ae: &mut Autoencoder, dataset: &[Volume], steps: usize) -> Result<AeTrainReport> {
    if dataset.is_empty() {
        return Err(Error::Invalid("autoencoder training set is empty".into()));
    }
    let mut report = AeTrainReport::default();
    if steps == 0 {
        return Ok(report);
    }
    let cfg = ae.cfg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0e4c);
    let mut opt = Adam::new(&ae.params, cfg.lr);
    let mut usage = vec![0usize; cfg.codebook_size];
    let mut recent_sites: Vec<Vec<f64>> = Vec::new();

    if !ae.codebook_initialized {
        let mut sites = Vec::new();
        for x in dataset.iter().take(8) {
            let z = ae.encode(x)?;
            sites.extend(site_vectors(&z.data.data, cfg.latent_channels));
        }
        ae.init_codebook_from(&sites, &mut rng);
    }

    for step in 0..steps {
        let mut sum_grads: Option<Vec<Vec<f64>>> = None;
        let mut m = AeStepMetrics {
            step,
            total: 0.0,
            reconstruction: 0.0,
            codebook: 0.0,
            commitment: 0.0,
        };
        recent_sites.clear();
        for _ in 0..cfg.batch_size {
            let x = &dataset[rng.random_range(0..dataset.len())];
            let mut g = Graph::new();
            let p = ae.params.bind(&mut g, true);
            let (loss, parts) = ae.loss_graph(&mut g, &p, x, None)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {lv} (reconstruction {})", parts.reconstruction),
                });
            }
            let grads = p.grads(&ae.params, &g.backward(loss));
            match &mut sum_grads {
                None => sum_grads = Some(grads),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                }
            }
            for &i in &parts.frozen.indices {
                usage[i] += 1;
            }
            recent_sites.extend(parts.latent_sites);
            m.total += lv;
            m.reconstruction += parts.reconstruction;
            m.codebook += parts.codebook;
            m.commitment += parts.commitment;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads = sum_grads.expect("batch is nonempty");
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
        opt.update(&mut ae.params, &grads);
        if !ae.params.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite weights after update".into(),
            });
        }
        m.total *= inv;
        m.reconstruction *= inv;
        m.codebook *= inv;
        m.commitment *= inv;
        report.metrics.push(m);
        if cfg.dead_code_interval > 0 && (step + 1) % cfg.dead_code_interval == 0 {
            let n = ae.reseed_dead_codes(&usage, &recent_sites, &mut rng);
            if n > 0 {
                log::debug!("step {step}: reseeded {n} unused codes");
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    Ok(report)
}

/// Mean squared reconstruction error over a set of volumes.
pub fn reconstruction_mse(ae: &Autoencoder, volumes: &[Volume]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for x in volumes {
        let r = ae.reconstruct(x)?;
        for (a, b) in r.data().iter().zip(x.data()) {
            total += (*a as f64 - *b as f64).powi(2);
        }
        n += x.data().len();
    }
    Ok(total / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use proptest::prelude::*;

    fn small_cfg() -> AeConfig {
        AeConfig {
            downsample: 2,
            latent_channels: 3,
            codebook_size: 16,
            widths: vec![4, 6],
            res_blocks: 1,
            batch_size: 2,
            lr: 1e-3,
            ..AeConfig::default()
        }
    }

    fn smooth_volume(n: usize, phase: f64) -> Volume {
        let dims = Dims::cube(n);
        let data = (0..dims.len())
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                (0.5 + 0.3 * ((z as f64 + phase) * 0.7).sin() * ((y + x) as f64 * 0.4).cos()) as f32
            })
            .collect();
        Volume::new(data, dims, Spacing::ISOTROPIC_1MM, true).unwrap()
    }

    #[test]
    fn shapes_follow_downsample_factor() {
        let ae = Autoencoder::new(AeConfig { codebook_size: 8, ..AeConfig::default() }).unwrap();
        let z = ae.encode(&smooth_volume(32, 0.0)).unwrap();
        assert_eq!(z.data.shape, vec![4, 8, 8, 8]);
        let out = ae.decode(&z).unwrap();
        assert_eq!(out.dims(), Dims::cube(32));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encode_is_deterministic_and_identity_mask_is_noop() {
        let ae = Autoencoder::new(small_cfg()).unwrap();
        let x = smooth_volume(8, 0.3);
        assert_eq!(ae.encode(&x).unwrap(), ae.encode(&x).unwrap());
        let masked = x.masked_out(&crate::volume::TumorMask::empty(x.dims())).unwrap();
        assert_eq!(ae.encode(&masked).unwrap(), ae.encode(&x).unwrap());
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let ae = Autoencoder::new(small_cfg()).unwrap();
        assert!(matches!(ae.encode(&smooth_volume(7, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_rejects_wrong_channels() {
        let ae = Autoencoder::new(small_cfg()).unwrap();
        let z = LatentTensor {
            data: Tensor::zeros(&[5, 2, 2, 2]),
            factor: 2,
            source_shape: Dims::cube(4),
            source_spacing: Spacing::ISOTROPIC_1MM,
        };
        assert!(matches!(ae.decode(&z), Err(Error::Shape(_))));
    }

    fn latent_from_sites(sites: &[Vec<f64>], spatial: [usize; 3]) -> LatentTensor {
        let c = sites[0].len();
        let s = sites.len();
        let mut data = vec![0.0; c * s];
        for (i, v) in sites.iter().enumerate() {
            for ch in 0..c {
                data[ch * s + i] = v[ch];
            }
        }
        LatentTensor {
            data: Tensor::new(vec![c, spatial[0], spatial[1], spatial[2]], data),
            factor: 1,
            source_shape: Dims::from_array(spatial),
            source_spacing: Spacing::ISOTROPIC_1MM,
        }
    }

    #[test]
    fn exact_entry_quantizes_with_zero_loss() {
        let cb = Codebook {
            entries: Tensor::new(vec![5, 2], (0..10).map(|v| v as f64).collect()),
        };
        let z = latent_from_sites(&vec![vec![6.0, 7.0]; 8], [2, 2, 2]);
        let q = quantize(&z, &cb).unwrap();
        assert!(q.indices.iter().all(|&i| i == 3));
        assert_eq!(q.losses, VqLosses { codebook: 0.0, commitment: 0.0 });
    }

    #[test]
    fn point_four_goes_to_zero_entry() {
        let c = 4;
        let cb = Codebook {
            entries: Tensor::new(vec![2, c], [vec![0.0; c], vec![1.0; c]].concat()),
        };
        let z = latent_from_sites(&[vec![0.4; c]], [1, 1, 1]);
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert!((q.losses.codebook - 4.0 * 0.16).abs() < 1e-12);
    }

    #[test]
    fn quantize_dim_mismatch() {
        let cb = Codebook { entries: Tensor::zeros(&[2, 3]) };
        let z = latent_from_sites(&[vec![0.0; 4]], [1, 1, 1]);
        assert!(matches!(quantize(&z, &cb), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn quantization_is_nearest_and_idempotent(
            entries in proptest::collection::vec(-2.0f64..2.0, 3 * 12),
            sites in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 8),
        ) {
            let cb = Codebook { entries: Tensor::new(vec![12, 3], entries) };
            let z = latent_from_sites(&sites, [2, 2, 2]);
            let q = quantize(&z, &cb).unwrap();
            for (i, v) in sites.iter().enumerate() {
                let chosen: f64 = cb.entry(q.indices[i]).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                for k in 0..cb.len() {
                    let other: f64 = cb.entry(k).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                    prop_assert!(chosen <= other);
                }
            }
            let again = quantize(&q.z_q, &cb).unwrap();
            prop_assert_eq!(again.z_q, q.z_q);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut ae = Autoencoder::new(small_cfg()).unwrap();
        let x = smooth_volume(8, 1.1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probe = ae.clone();
        let frozen = {
            let mut g = Graph::new();
            let p = ae.params.bind(&mut g, false);
            ae.loss_graph(&mut g, &p, &x, None).unwrap().1.frozen
        };
        let check = gradcheck(&mut ae.params, 16, 1e-6, &mut rng, |store, want| {
            let mut model = probe.clone();
            model.params = store.clone();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, want);
            let (loss, _) = model.loss_graph(&mut g, &p, &x, Some(&frozen)).unwrap();
            let v = g.value(loss).item();
            (v, want.then(|| p.grads(&model.params, &g.backward(loss))))
        });
        assert!(check.max_rel_error < 1e-3, "{:?}", check.probes);
    }

    #[test]
    fn zero_steps_is_noop_and_training_is_reproducible() {
        let data: Vec<Volume> = (0..4).map(|i| smooth_volume(8, i as f64)).collect();
        let mut ae = Autoencoder::new(small_cfg()).unwrap();
        let before = ae.params.clone();
        let r = train_autoencoder(&mut ae, &data, 0).unwrap();
        assert!(r.metrics.is_empty());
        assert_eq!(ae.params, before);

        let run = || {
            let mut ae = Autoencoder::new(small_cfg()).unwrap();
            train_autoencoder(&mut ae, &data, 5).unwrap()
        };
        assert_eq!(run(), run());
        assert!(train_autoencoder(&mut Autoencoder::new(small_cfg()).unwrap(), &[], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = Autoencoder::new(small_cfg()).unwrap();
        let ck = Checkpoint::from_bytes(&ae.checkpoint().to_bytes()).unwrap();
        let back = Autoencoder::from_checkpoint(&ck).unwrap();
        assert_eq!(back.config(), ae.config());
        let x = smooth_volume(8, 0.0);
        let a = ae.encode(&x).unwrap();
        let b = back.encode(&x).unwrap();
        let err = a.data.data.iter().zip(&b.data.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4);
    }
}
