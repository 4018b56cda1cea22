//! Push/pull objective on tumor-region features of the denoiser: triplets of
//! (anchor, same-description positive on another volume, different-description
//! negative on the anchor volume).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, ldm_loss_graph, pool_mask_tensor, reverse_step, standard_normal, ConditionBundle, Denoiser,
    LatentSample, LdmDraw, NoiseSchedule, SamplerMode,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_MARGIN: f64 = 1.0;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotTag {
    Anchor,
    Positive,
    Negative,
}

/// One generation branch: the volume (with its mask and healthy latent) and
/// the sample whose report variant supplies the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub volume: usize,
    pub text_from: usize,
    pub variant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: Slot,
    pub positive: Slot,
    pub negative: Slot,
}

fn term_set(s: &LatentSample) -> Vec<&str> {
    let mut t: Vec<&str> = s.terms.iter().map(String::as_str).collect();
    t.sort_unstable();
    t.dedup();
    t
}

impl Triplet {
    /// Checks the same/different description and shared-volume rules.
    pub fn validate(&self, samples: &[LatentSample]) -> Result<()> {
        let get = |i: usize| {
            samples
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("triplet index {i} out of range")))
        };
        let a = term_set(get(self.anchor.text_from)?);
        if term_set(get(self.positive.text_from)?) != a {
            return Err(Error::Contract("positive description differs from anchor".into()));
        }
        if term_set(get(self.negative.text_from)?) == a {
            return Err(Error::Contract("negative description equals anchor".into()));
        }
        if self.negative.volume != self.anchor.volume {
            return Err(Error::Contract("negative must share the anchor volume".into()));
        }
        if self.positive.volume == self.anchor.volume {
            return Err(Error::Contract("positive must use a different volume".into()));
        }
        for s in [self.anchor, self.positive, self.negative] {
            if s.variant >= get(s.text_from)?.embeddings.len() {
                return Err(Error::Invalid("variant index out of range".into()));
            }
        }
        Ok(())
    }
}

/// Draws a random valid triplet; anchors come from `anchors` (all samples if empty).
pub fn sample_triplet<R: Rng + ?Sized>(samples: &[LatentSample], anchors: &[usize], rng: &mut R) -> Result<Triplet> {
    let all: Vec<usize> = (0..samples.len()).collect();
    let pool = if anchors.is_empty() { &all[..] } else { anchors };
    let sets: Vec<Vec<&str>> = samples.iter().map(term_set).collect();
    let usable: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&a| {
            (0..samples.len()).any(|p| p != a && sets[p] == sets[a]) && (0..samples.len()).any(|n| sets[n] != sets[a])
        })
        .collect();
    let &a = usable.choose(rng).ok_or_else(|| {
        Error::InsufficientPool("no anchor has both a same-description partner and a different description".into())
    })?;
    let positives: Vec<usize> = (0..samples.len()).filter(|&p| p != a && sets[p] == sets[a]).collect();
    let negatives: Vec<usize> = (0..samples.len()).filter(|&n| sets[n] != sets[a]).collect();
    let p = *positives.choose(rng).expect("checked nonempty");
    let n = *negatives.choose(rng).expect("checked nonempty");
    let pick = |i: usize, rng: &mut R| rng.random_range(0..samples[i].embeddings.len());
    let t = Triplet {
        anchor: Slot { volume: a, text_from: a, variant: pick(a, rng) },
        positive: Slot { volume: p, text_from: p, variant: pick(p, rng) },
        negative: Slot { volume: a, text_from: n, variant: pick(n, rng) },
    };
    debug_assert!(t.validate(samples).is_ok());
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorFeature {
    pub vector: Vec<f64>,
    pub source: SlotTag,
}

impl TumorFeature {
    pub fn check(&self) -> Result<()> {
        let n = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!("feature norm {n} is not 1")));
        }
        Ok(())
    }
}

fn mask_weights(mask: &Tensor) -> Result<Vec<f64>> {
    if !mask.data.iter().any(|v| *v > 0.0) {
        return Err(Error::EmptyMask("mask is empty at feature resolution; magnify it first".into()));
    }
    Ok(mask.data.clone())
}

/// Masked average pool of `[C, ...]` activations, then L2 normalization.
pub fn extract_tumor_feature(activations: &Tensor, mask: &Tensor, source: SlotTag) -> Result<TumorFeature> {
    let c = activations.shape[0];
    let per = activations.numel() / c;
    if mask.numel() != per {
        return Err(Error::Shape(format!("mask covers {} sites, activations {per}", mask.numel())));
    }
    let mut g = Graph::new();
    let x = g.constant(activations.clone());
    let f = feature_graph(&mut g, x, mask)?;
    let vector = g.value(f).data.clone();
    if vector.iter().all(|v| *v == 0.0) {
        return Err(Error::Numeric("pooled activations are all zero".into()));
    }
    Ok(TumorFeature { vector, source })
}

/// Tape version of [`extract_tumor_feature`].
pub fn feature_graph(g: &mut Graph, activations: Var, mask: &Tensor) -> Result<Var> {
    let w = mask_weights(mask)?;
    let pooled = g.weighted_pool(activations, &w);
    Ok(g.l2_normalize(pooled))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLosses {
    pub same: f64,
    pub different: f64,
    pub contrastive: f64,
}

/// `L_same = |fa - fp|^2`, `L_diff = min(|fa - fn|^2, margin)`, difference of the two.
pub fn contrastive_losses(
    fa: &TumorFeature,
    fp: &TumorFeature,
    fneg: &TumorFeature,
    margin: f64,
) -> Result<ContrastiveLosses> {
    if !(margin > 0.0) {
        return Err(Error::Invalid(format!("margin {margin} must be positive")));
    }
    for f in [fa, fp, fneg] {
        f.check()?;
    }
    if fa.vector.len() != fp.vector.len() || fa.vector.len() != fneg.vector.len() {
        return Err(Error::Shape("feature lengths differ".into()));
    }
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let same = d2(&fa.vector, &fp.vector);
    let different = d2(&fa.vector, &fneg.vector).min(margin);
    Ok(ContrastiveLosses {
        same,
        different,
        contrastive: same - different,
    })
}

/// Tape version returning `(L_contrastive, L_same, L_diff)`.
pub fn contrastive_graph(g: &mut Graph, fa: Var, fp: Var, fneg: Var, margin: f64) -> (Var, Var, Var) {
    let dp = g.sub(fa, fp);
    let dp2 = g.mul(dp, dp);
    let same = g.sum(dp2);
    let dn = g.sub(fa, fneg);
    let dn2 = g.mul(dn, dn);
    let dn2 = g.sum(dn2);
    let diff = g.clamp_max(dn2, margin);
    (g.sub(same, diff), same, diff)
}

/// Random quantities shared by the three branches of one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDraw {
    pub t: usize,
    pub eps: Tensor,
}

impl TripletDraw {
    pub fn sample<R: Rng + ?Sized>(samples: &[LatentSample], schedule: &NoiseSchedule, rng: &mut R) -> Self {
        TripletDraw {
            t: rng.random_range(1..=schedule.steps()),
            eps: standard_normal(rng, &samples[0].z0.shape),
        }
    }
}

fn slot_condition(samples: &[LatentSample], slot: Slot, t: usize) -> ConditionBundle {
    let v = &samples[slot.volume];
    ConditionBundle {
        z_healthy: v.z_healthy.clone(),
        text: samples[slot.text_from].embeddings[slot.variant].clone(),
        mask_latent: v.mask_latent.clone(),
        t,
    }
}

/// One-step feature of a branch: denoiser pass on `z_t` noised from the
/// branch volume's latent with the shared draw.
pub fn branch_feature_graph(
    g: &mut Graph,
    p: &Bound,
    model: &Denoiser,
    samples: &[LatentSample],
    slot: Slot,
    draw: &TripletDraw,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let v = &samples[slot.volume];
    if draw.eps.shape != v.z0.shape {
        return Err(Error::Shape("triplet volumes must share a latent shape".into()));
    }
    let z_t = forward_noise(&v.z0, draw.t, &draw.eps, schedule)?;
    let z = g.constant(z_t);
    let out = model.forward_graph(g, p, z, &slot_condition(samples, slot, draw.t))?;
    let mask = pool_mask_tensor(&v.mask_latent, 2)?;
    feature_graph(g, out.bottleneck, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ldm: f64,
    pub same: f64,
    pub different: f64,
}

/// `mean(L_ldm over batch) + lambda_c * (L_same - L_diff)` on the tape.
/// With `lambda_c == 0` or no triplet, no contrastive branch is built.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph(
    g: &mut Graph,
    p: &Bound,
    model: &Denoiser,
    samples: &[LatentSample],
    batch: &[(usize, LdmDraw)],
    triplet: Option<(&Triplet, &TripletDraw)>,
    schedule: &NoiseSchedule,
    lambda_c: f64,
    margin: f64,
) -> Result<(Var, LossParts)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut acc: Option<Var> = None;
    for (i, draw) in batch {
        let (l, _) = ldm_loss_graph(g, p, model, &samples[*i], draw, schedule)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l),
        });
    }
    let ldm = g.scale(acc.expect("batch nonempty"), 1.0 / batch.len() as f64);
    let mut parts = LossParts {
        ldm: g.value(ldm).item(),
        ..LossParts::default()
    };
    let total = match triplet {
        Some((tr, draw)) if lambda_c != 0.0 => {
            tr.validate(samples)?;
            let fa = branch_feature_graph(g, p, model, samples, tr.anchor, draw, schedule)?;
            let fp = branch_feature_graph(g, p, model, samples, tr.positive, draw, schedule)?;
            let fneg = branch_feature_graph(g, p, model, samples, tr.negative, draw, schedule)?;
            let (c, same, diff) = contrastive_graph(g, fa, fp, fneg, margin);
            parts.same = g.value(same).item();
            parts.different = g.value(diff).item();
            let weighted = g.scale(c, lambda_c);
            g.add(ldm, weighted)
        }
        _ => ldm,
    };
    parts.total = g.value(total).item();
    Ok((total, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Single denoiser pass at a shared timestep (training default).
    #[default]
    OneStep,
    /// Full reverse loop, then features from a final pass at `t = 1`.
    FullGeneration,
}

/// Features of the three branches without gradients.
pub fn triplet_features<R: Rng + ?Sized>(
    model: &Denoiser,
    samples: &[LatentSample],
    triplet: &Triplet,
    schedule: &NoiseSchedule,
    mode: FeatureMode,
    rng: &mut R,
) -> Result<[TumorFeature; 3]> {
    triplet.validate(samples)?;
    let slots = [
        (triplet.anchor, SlotTag::Anchor),
        (triplet.positive, SlotTag::Positive),
        (triplet.negative, SlotTag::Negative),
    ];
    let feats: Vec<TumorFeature> = match mode {
        FeatureMode::OneStep => {
            let draw = TripletDraw::sample(samples, schedule, rng);
            slots
                .iter()
                .map(|(slot, tag)| {
                    let mut g = Graph::new();
                    let p = model.params().bind(&mut g, false);
                    let f = branch_feature_graph(&mut g, &p, model, samples, *slot, &draw, schedule)?;
                    Ok(TumorFeature {
                        vector: g.value(f).data.clone(),
                        source: *tag,
                    })
                })
                .collect::<Result<_>>()?
        }
        FeatureMode::FullGeneration => {
            let start = standard_normal(rng, &samples[0].z0.shape);
            let mut out = Vec::with_capacity(3);
            for (slot, tag) in slots {
                let mut cond = slot_condition(samples, slot, schedule.steps());
                let mut z = start.clone();
                for t in (1..=schedule.steps()).rev() {
                    cond.t = t;
                    let eps = model.predict_noise(&z, &cond)?;
                    z = reverse_step(&z, &eps, t, schedule, SamplerMode::Deterministic, rng)?;
                }
                cond.t = 1;
                let mut g = Graph::new();
                let p = model.params().bind(&mut g, false);
                let zv = g.constant(z);
                let vars = model.forward_graph(&mut g, &p, zv, &cond)?;
                let mask = pool_mask_tensor(&samples[slot.volume].mask_latent, 2)?;
                let f = feature_graph(&mut g, vars.bottleneck, &mask)?;
                out.push(TumorFeature {
                    vector: g.value(f).data.clone(),
                    source: tag,
                });
            }
            out
        }
    };
    Ok(feats.try_into().expect("three branches"))
}

/// Mean intra-text (anchor-positive) and inter-text (anchor-negative) feature distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub triplets: usize,
    pub mean_intra: f64,
    pub mean_inter: f64,
}

pub fn feature_separation<R: Rng + ?Sized>(
    model: &Denoiser,
    samples: &[LatentSample],
    triplets: &[Triplet],
    schedule: &NoiseSchedule,
    mode: FeatureMode,
    rng: &mut R,
) -> Result<SeparationReport> {
    if triplets.is_empty() {
        return Err(Error::Invalid("no triplets".into()));
    }
    let dist = |a: &TumorFeature, b: &TumorFeature| {
        a.vector.iter().zip(&b.vector).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let (mut intra, mut inter) = (0.0, 0.0);
    for t in triplets {
        let [fa, fp, fneg] = triplet_features(model, samples, t, schedule, mode, rng)?;
        intra += dist(&fa, &fp);
        inter += dist(&fa, &fneg);
    }
    let n = triplets.len() as f64;
    Ok(SeparationReport {
        triplets: triplets.len(),
        mean_intra: intra / n,
        mean_inter: inter / n,
    })
}
