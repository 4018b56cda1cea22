//! Phantom-backed training sets: tumor patches with descriptor sets and
//! report variants, plus healthy patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TrainingItem;
use crate::error::{Error, Result};
use crate::organ::Organ;
use crate::text::{generate_variants, DescriptorSet, LmClient, ReportVariantSet, DEFAULT_SIMILARITY_THRESHOLD};
use crate::volume::{crop_patch, crop_patch_at, make_healthy, make_phantom, preprocess, Dims, PhantomSpec, TumorMask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub organs: Vec<Organ>,
    /// Descriptor profiles; each must be valid for every listed organ.
    pub profiles: Vec<Vec<String>>,
    /// Items per (organ, profile).
    pub per_profile: usize,
    /// Side of the rendered phantom cube.
    pub volume: usize,
    /// Side of the tumor-centred training patch.
    pub patch: usize,
    pub radius_mm: [f64; 2],
    /// Report variants per item with text augmentation.
    pub variants: usize,
    pub similarity_threshold: f64,
    /// Tumor-free patches rendered per organ.
    pub healthy_per_organ: usize,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        PhantomSetConfig {
            organs: vec![Organ::Liver, Organ::Pancreas, Organ::Kidney],
            profiles: [
                &["hypodense"][..],
                &["hyperenhancing"],
                &["cystic"],
                &["heterogeneous"],
                &["hypodense", "ill-defined"],
                &["hyperenhancing", "heterogeneous"],
                &["homogeneous"],
                &["ill-defined"],
            ]
            .iter()
            .map(|p| p.iter().map(|s| s.to_string()).collect())
            .collect(),
            per_profile: 4,
            volume: 32,
            patch: 16,
            radius_mm: [3.5, 6.0],
            variants: 16,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            healthy_per_organ: 8,
        }
    }
}

impl PhantomSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() || self.profiles.is_empty() {
            return Err(Error::Invalid("phantom set needs organs and profiles".into()));
        }
        if self.patch == 0 || self.patch > self.volume || !self.patch.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "patch {} must be even and within the volume {}",
                self.patch, self.volume
            )));
        }
        let [lo, hi] = self.radius_mm;
        if !(lo > 0.0 && hi >= lo) || 2.0 * hi + 1.0 > self.patch as f64 {
            return Err(Error::Invalid(format!("radius range {lo}..{hi} does not fit the patch")));
        }
        if self.variants == 0 {
            return Err(Error::Invalid("variants must be at least 1".into()));
        }
        for o in &self.organs {
            for p in &self.profiles {
                let terms: Vec<&str> = p.iter().map(String::as_str).collect();
                PhantomSpec::centered(*o, &terms, self.volume, lo, 0).appearances()?;
                DescriptorSet::from_terms("check", *o, &terms)?;
            }
        }
        Ok(())
    }
}

/// A random valid placement for the profile inside the organ.
fn random_spec<R: Rng + ?Sized>(cfg: &PhantomSetConfig, organ: Organ, profile: &[&str], rng: &mut R) -> Result<PhantomSpec> {
    let n = cfg.volume;
    for _ in 0..200 {
        let r = rng.random_range(cfg.radius_mm[0]..=cfg.radius_mm[1]);
        let mut spec = PhantomSpec::centered(organ, profile, n, r, rng.random());
        let jitter = (n / 6).max(1) as i64;
        spec.tumor_center = spec
            .tumor_center
            .map(|c| (c as i64 + rng.random_range(-jitter..=jitter)).clamp(0, n as i64 - 1) as usize);
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::Invalid(format!("cannot place a lesion for {profile:?} in a {n}^3 phantom")))
}

/// Renders, normalizes and crops one item per (organ, profile, k).
pub fn phantom_training_items(
    cfg: &PhantomSetConfig,
    text_aug: bool,
    client: &LmClient,
    seed: u64,
) -> Result<Vec<TrainingItem>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = Dims::cube(cfg.patch);
    let mut out = Vec::new();
    for &organ in &cfg.organs {
        for (pi, profile) in cfg.profiles.iter().enumerate() {
            let terms: Vec<&str> = profile.iter().map(String::as_str).collect();
            let descriptor = DescriptorSet::from_terms(format!("{organ}-p{pi}"), organ, &terms)?;
            let variants = if text_aug {
                generate_variants(&descriptor, cfg.variants, client, cfg.similarity_threshold)?
            } else {
                ReportVariantSet::single(descriptor.report_id.clone(), descriptor.cleaned_text.clone())
            };
            for k in 0..cfg.per_profile {
                let spec = random_spec(cfg, organ, &terms, &mut rng)?;
                let (v, m, _) = make_phantom(&spec)?;
                let v = preprocess(&v)?;
                let (volume, mask) = crop_patch(&v, &m, patch)?;
                out.push(TrainingItem {
                    id: format!("{organ}-p{pi}-{k}"),
                    volume,
                    mask,
                    descriptor: descriptor.clone(),
                    variants: variants.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// A full normalized phantom with its ground-truth tumor.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: String,
    pub organ: Organ,
    pub terms: Vec<String>,
    pub volume: Volume,
    pub mask: TumorMask,
}

/// Uncropped phantoms, `per_profile` per (organ, profile), for detection and mining.
pub fn evaluation_phantoms(cfg: &PhantomSetConfig, per_profile: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &organ in &cfg.organs {
        for (pi, profile) in cfg.profiles.iter().enumerate() {
            let terms: Vec<&str> = profile.iter().map(String::as_str).collect();
            for k in 0..per_profile {
                let spec = random_spec(cfg, organ, &terms, &mut rng)?;
                let (v, mask, _) = make_phantom(&spec)?;
                out.push(PhantomCase {
                    id: format!("{organ}-p{pi}-e{k}"),
                    organ,
                    terms: profile.clone(),
                    volume: preprocess(&v)?,
                    mask,
                });
            }
        }
    }
    Ok(out)
}

/// Normalized tumor-free patches taken around the organ centre.
pub fn healthy_patches(cfg: &PhantomSetConfig, organ: Organ, count: usize, seed: u64) -> Result<Vec<Volume>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(cfg.volume);
    let jitter = (cfg.volume / 8) as i64;
    (0..count)
        .map(|_| {
            let v = preprocess(&make_healthy(organ, dims, rng.random())?)?;
            let c = [0; 3].map(|_: usize| (cfg.volume as i64 / 2 + rng.random_range(-jitter..=jitter)) as usize);
            let (p, _) = crop_patch_at(&v, &TumorMask::empty(dims), c, Dims::cube(cfg.patch))?;
            Ok(p)
        })
        .collect()
}

/// Ellipsoid-free test mask: voxels within `radius` of the patch centre.
pub fn sphere_mask(dims: Dims, radius: f64) -> TumorMask {
    let c = dims.as_array().map(|n| (n as f64 - 1.0) / 2.0);
    TumorMask::from_fn(dims, |z, y, x| {
        let p = [z, y, x];
        (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>().sqrt() <= radius
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSetConfig {
        PhantomSetConfig {
            organs: vec![Organ::Liver, Organ::Kidney],
            per_profile: 2,
            variants: 3,
            ..PhantomSetConfig::default()
        }
    }

    #[test]
    fn items_are_aligned_and_reproducible() {
        let cfg = small();
        let client = LmClient::mock();
        let a = phantom_training_items(&cfg, true, &client, 1).unwrap();
        assert_eq!(a.len(), 2 * 8 * 2);
        for it in &a {
            assert_eq!(it.volume.dims(), Dims::cube(16));
            assert!(!it.mask.is_empty() && it.volume.is_normalized());
            assert_eq!(it.variants.len(), 3);
            for v in &it.variants.variants {
                assert!(it.descriptor.terms.iter().all(|t| v.contains(t.as_str())), "{v}");
            }
        }
        let b = phantom_training_items(&cfg, true, &client, 1).unwrap();
        assert_eq!(a[5].volume, b[5].volume);
        let single = phantom_training_items(&cfg, false, &client, 1).unwrap();
        assert!(single.iter().all(|it| it.variants.len() == 1));
        let full = evaluation_phantoms(&cfg, 1, 2).unwrap();
        assert_eq!(full.len(), 2 * 8);
        assert!(full.iter().all(|c| c.volume.dims() == Dims::cube(32) && !c.mask.is_empty()));
    }

    #[test]
    fn healthy_and_masks() {
        let cfg = small();
        let h = healthy_patches(&cfg, Organ::Liver, 3, 2).unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.iter().all(|v| v.dims() == Dims::cube(16) && v.is_normalized()));
        let m = sphere_mask(Dims::cube(16), 4.5);
        assert!(m.count() > 300 && m.count() < 400);
        let bad = PhantomSetConfig {
            profiles: vec![vec!["hypodense".into(), "hyperenhancing".into()]],
            ..small()
        };
        assert!(bad.validate().is_err());
        assert!(PhantomSetConfig { patch: 15, ..small() }.validate().is_err());
    }
}
