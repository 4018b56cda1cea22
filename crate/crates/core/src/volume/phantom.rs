//! Procedural CT phantoms with lesions whose appearance follows their
//! descriptor profile.
//!
//! Intensities are synthesized in normalized units and stored as HU, so
//! [`preprocess`](super::preprocess) recovers them. Appearance contracts, in
//! normalized units, with background = organ voxels outside the mask:
//!
//! | descriptor class | contract |
//! |---|---|
//! | hypodense | tumor mean < background mean - 0.15 |
//! | hyperdense | tumor mean > background mean + 0.15 |
//! | cystic | tumor SD < 0.02, sharp edge |
//! | heterogeneous | tumor SD > 0.08 |
//! | ill-defined | edge spread over >= 3 voxel layers |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::to_hu;
use super::{Dims, Spacing, TumorMask, Volume};
use crate::error::{Error, Result};
use crate::organ::Organ;
use crate::text::{describe_terms, Appearance, Vocabulary};

/// Lesion contrast for explicit attenuation descriptors.
const ATTENUATION_SHIFT: f64 = 0.25;
/// Lesion contrast when no attenuation descriptor is given.
const DEFAULT_SHIFT: f64 = -0.10;
const ORGAN_TEXTURE: f64 = 0.03;
const WHITE_NOISE_SD: f64 = 0.006;
/// Half-width, in voxels, of the feathered edge of ill-defined lesions.
const FEATHER_HALF_WIDTH: f64 = 3.0;
const FAT_HU: f64 = -100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub organ: Organ,
    pub descriptor_profile: Vec<String>,
    /// Voxel coordinates (d, h, w).
    pub tumor_center: [usize; 3],
    /// Semi-axes in mm (d, h, w).
    pub tumor_radii: [f64; 3],
    pub seed: u64,
    #[serde(default = "default_shape")]
    pub shape: Dims,
}

fn default_shape() -> Dims {
    Dims::cube(32)
}

impl PhantomSpec {
    /// Lesion centred in a cube of side `n` with isotropic radius `r` mm.
    pub fn centered(organ: Organ, profile: &[&str], n: usize, r: f64, seed: u64) -> Self {
        PhantomSpec {
            organ,
            descriptor_profile: profile.iter().map(|s| s.to_string()).collect(),
            tumor_center: [n / 2; 3],
            tumor_radii: [r; 3],
            seed,
            shape: Dims::cube(n),
        }
    }

    pub fn appearances(&self) -> Result<Vec<Appearance>> {
        let vocab = Vocabulary::builtin();
        let mut out = Vec::new();
        for term in &self.descriptor_profile {
            let t = vocab.lookup(self.organ, &term.to_ascii_lowercase()).ok_or_else(|| {
                Error::Invalid(format!("`{term}` is not in the {} vocabulary", self.organ))
            })?;
            if !out.contains(&t.appearance) {
                out.push(t.appearance);
            }
        }
        for (i, a) in out.iter().enumerate() {
            if let Some(b) = out[i + 1..].iter().find(|b| a.conflicts_with(**b)) {
                return Err(Error::Invalid(format!("contradictory profile: {a} with {b}")));
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.appearances()?;
        if self.shape.is_empty() {
            return Err(Error::Invalid("phantom shape is empty".into()));
        }
        if self.tumor_radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Invalid(format!("tumor radii {:?} must be positive", self.tumor_radii)));
        }
        let organ = OrganRegion::new(self.shape);
        // Sample the lesion surface (plus the feathered rim) against the organ ellipsoid.
        let reach = FEATHER_HALF_WIDTH;
        for i in 0..24 {
            for j in 0..=12 {
                let theta = std::f64::consts::PI * j as f64 / 12.0;
                let phi = 2.0 * std::f64::consts::PI * i as f64 / 24.0;
                let dir = [theta.cos(), theta.sin() * phi.cos(), theta.sin() * phi.sin()];
                let p: [f64; 3] = std::array::from_fn(|a| {
                    self.tumor_center[a] as f64 + dir[a] * (self.tumor_radii[a] + reach)
                });
                if organ.radius(p) > 1.0 {
                    return Err(Error::Invalid("tumor ellipsoid does not fit inside the organ".into()));
                }
            }
        }
        Ok(())
    }
}

struct OrganRegion {
    center: [f64; 3],
    semi: [f64; 3],
}

impl OrganRegion {
    fn new(dims: Dims) -> Self {
        let ext = dims.as_array();
        OrganRegion {
            center: ext.map(|n| (n as f64 - 1.0) / 2.0),
            semi: ext.map(|n| 0.47 * n as f64),
        }
    }

    /// Normalized ellipsoidal radius (1 on the organ surface).
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
struct ValueNoise {
    seed: u64,
}

impl ValueNoise {
    fn lattice(&self, cell: [i64; 3], octave: u64) -> f64 {
        let mut h = self.seed ^ octave.wrapping_mul(0x51_7cc1_b727_220a);
        for c in cell {
            h = splitmix(h ^ c as u64);
        }
        (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    fn sample(&self, p: [f64; 3], cell: f64, octave: u64) -> f64 {
        let q = p.map(|v| v / cell);
        let base = q.map(|v| v.floor() as i64);
        let frac: [f64; 3] = std::array::from_fn(|a| {
            let t = q[a] - base[a] as f64;
            t * t * (3.0 - 2.0 * t)
        });
        let mut acc = 0.0;
        for corner in 0..8u32 {
            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let mut w = 1.0;
            let mut c = base;
            for a in 0..3 {
                c[a] += off[a] as i64;
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            acc += w * self.lattice(c, octave);
        }
        acc
    }

    /// Three octaves, persistence 0.5, normalized to `[-1, 1]`.
    fn fractal(&self, p: [f64; 3], base_cell: f64) -> f64 {
        let mut amp = 1.0;
        let mut cell = base_cell;
        let (mut acc, mut total) = (0.0, 0.0);
        for octave in 0..3 {
            acc += amp * self.sample(p, cell, octave);
            total += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        acc / total
    }
}

fn organ_level(organ: Organ) -> f64 {
    super::rescale_clipped(organ.parenchyma_hu(), super::HU_MIN, super::HU_MAX)
}

/// Normalized-unit background: fat surround, textured parenchyma, scanner noise.
fn background(organ: Organ, dims: Dims, seed: u64) -> Vec<f64> {
    let region = OrganRegion::new(dims);
    let tissue = ValueNoise { seed: splitmix(seed ^ 0xa11c_e5ed) };
    let level = organ_level(organ);
    let fat = super::rescale_clipped(FAT_HU, super::HU_MIN, super::HU_MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5ca1_ab1e));
    let white = Normal::new(0.0, WHITE_NOISE_SD).expect("valid sd");
    (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            let p = c.map(|v| v as f64);
            let r = region.radius(p);
            // 1.5-voxel soft organ boundary
            let inside = (1.0 - ((r - 1.0) * region.semi[0] / 1.5).clamp(-0.5, 0.5) - 0.5).clamp(0.0, 1.0);
            let texture = ORGAN_TEXTURE * tissue.fractal(p, 8.0);
            let v = fat + inside * (level + texture - fat);
            v + white.sample(&mut rng)
        })
        .collect()
}

fn to_volume(values: Vec<f64>, dims: Dims) -> Result<Volume> {
    let data = values
        .into_iter()
        .map(|v| to_hu(v.clamp(0.0, 1.0)) as f32)
        .collect();
    Volume::new(data, dims, Spacing::ISOTROPIC_1MM, false)
}

/// Tumor-free organ background with the same texture a phantom of this
/// seed would carry.
pub fn make_healthy(organ: Organ, dims: Dims, seed: u64) -> Result<Volume> {
    to_volume(background(organ, dims, seed), dims)
}

/// Renders a phantom and returns `(volume_in_hu, mask, reference_text)`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, TumorMask, String)> {
    spec.validate()?;
    let looks = spec.appearances()?;
    let has = |a: Appearance| looks.contains(&a);
    let dims = spec.shape;
    let mut values = background(spec.organ, dims, spec.seed);

    let shift = if has(Appearance::Hypodense) || has(Appearance::Cystic) {
        -ATTENUATION_SHIFT
    } else if has(Appearance::Hyperdense) {
        ATTENUATION_SHIFT
    } else {
        DEFAULT_SHIFT
    };
    let lesion_noise = ValueNoise { seed: splitmix(spec.seed ^ 0x1e51_0a55) };
    let feathered = has(Appearance::IllDefined);
    let min_radius = spec.tumor_radii.iter().copied().fold(f64::INFINITY, f64::min);
    let level = organ_level(spec.organ);

    let mut mask = vec![0u8; dims.len()];
    for (i, v) in values.iter_mut().enumerate() {
        let c = dims.coords(i).map(|x| x as f64);
        let r = (0..3)
            .map(|a| ((c[a] - spec.tumor_center[a] as f64) / spec.tumor_radii[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        // approximate signed distance to the lesion surface, in voxels
        let sd = (r - 1.0) * min_radius;
        let weight = if feathered {
            let t = ((sd + FEATHER_HALF_WIDTH) / (2.0 * FEATHER_HALF_WIDTH)).clamp(0.0, 1.0);
            1.0 - t * t * (3.0 - 2.0 * t)
        } else if sd <= 0.0 {
            1.0
        } else {
            0.0
        };
        if sd <= 0.0 {
            mask[i] = 1;
        }
        if weight == 0.0 {
            continue;
        }
        let lesion = if has(Appearance::Cystic) {
            // fluid: flat interior, scanner noise suppressed
            level + shift + 0.1 * (*v - level)
        } else if has(Appearance::Heterogeneous) {
            let n = lesion_noise.fractal(c, 3.0);
            level + shift + 0.16 * (4.0 * n).tanh()
        } else if has(Appearance::Homogeneous) {
            level + shift + 0.3 * (*v - level)
        } else {
            *v + shift
        };
        *v = (1.0 - weight) * *v + weight * lesion;
    }
    let volume = to_volume(values, dims)?;
    let mask = TumorMask::new(mask, dims)?;
    if mask.is_empty() {
        return Err(Error::Invalid("tumor ellipsoid covers no voxel".into()));
    }
    let terms: Vec<String> = spec
        .descriptor_profile
        .iter()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    let text = if terms.is_empty() {
        format!("a lesion in the {}", spec.organ)
    } else {
        describe_terms(&terms, spec.organ)
    };
    Ok((volume, mask, text))
}

/// Organ voxels outside the mask, i.e. the phantom background the
/// appearance contracts refer to.
pub fn background_mask(dims: Dims, tumor: &TumorMask) -> TumorMask {
    let region = OrganRegion::new(dims);
    TumorMask::from_fn(dims, |z, y, x| {
        region.radius([z as f64, y as f64, x as f64]) < 0.95 && !tumor.get(z, y, x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{boundary_profile, preprocess};

    fn stats(spec: &PhantomSpec) -> (f64, f64, f64, Option<usize>) {
        let (v, m, _) = make_phantom(spec).unwrap();
        let v = preprocess(&v).unwrap();
        let bg = v.mean_where(&background_mask(v.dims(), &m), true).unwrap();
        let p = boundary_profile(&v, &m).unwrap();
        (p.tumor_mean, bg, p.tumor_sd, p.transition_width)
    }

    fn spec(profile: &[&str], seed: u64) -> PhantomSpec {
        PhantomSpec::centered(Organ::Liver, profile, 32, 6.0, seed)
    }

    #[test]
    fn deterministic_given_seed() {
        let s = spec(&["hypodense"], 7);
        assert_eq!(make_phantom(&s).unwrap(), make_phantom(&s).unwrap());
        let other = spec(&["hypodense"], 8);
        assert_ne!(make_phantom(&s).unwrap().0, make_phantom(&other).unwrap().0);
    }

    #[test]
    fn hypodense_seed_7() {
        let (t, bg, _, _) = stats(&spec(&["hypodense"], 7));
        assert!(t < bg - 0.15, "tumor {t} background {bg}");
    }

    #[test]
    fn cystic_smoother_than_heterogeneous() {
        let (_, _, sd_c, _) = stats(&spec(&["cystic"], 3));
        let (_, _, sd_h, _) = stats(&spec(&["heterogeneous"], 3));
        assert!(sd_c < sd_h);
    }

    #[test]
    fn contracts_hold_over_many_seeds() {
        for seed in 0..20u64 {
            for organ in Organ::ALL {
                let vocab = Vocabulary::builtin();
                for term in vocab.terms(organ) {
                    let s = PhantomSpec::centered(organ, &[&term.phrase], 32, 5.0 + (seed % 3) as f64, seed);
                    let (t, bg, sd, width) = stats(&s);
                    let ctx = format!("{organ}/{} seed {seed}: mean {t:.3} bg {bg:.3} sd {sd:.3} width {width:?}", term.phrase);
                    match term.appearance {
                        Appearance::Hypodense => assert!(t < bg - 0.15, "{ctx}"),
                        Appearance::Hyperdense => assert!(t > bg + 0.15, "{ctx}"),
                        Appearance::Cystic => {
                            assert!(sd < 0.02, "{ctx}");
                            assert!(width.unwrap() <= 1, "{ctx}");
                        }
                        Appearance::Heterogeneous => assert!(sd > 0.08, "{ctx}"),
                        Appearance::IllDefined => assert!(width.unwrap() >= 3, "{ctx}"),
                        Appearance::WellDefined => assert!(width.unwrap() <= 1, "{ctx}"),
                        Appearance::Homogeneous => assert!(sd < 0.03, "{ctx}"),
                    }
                }
            }
        }
    }

    #[test]
    fn contradictory_profile_rejected() {
        let e = make_phantom(&spec(&["hypodense", "hyperenhancing"], 1)).unwrap_err();
        assert!(matches!(e, Error::Invalid(_)));
    }

    #[test]
    fn unknown_term_and_oversized_tumor_rejected() {
        assert!(make_phantom(&spec(&["sparkly"], 1)).is_err());
        assert!(make_phantom(&PhantomSpec::centered(Organ::Liver, &["cyst"], 32, 14.0, 1)).is_err());
    }

    #[test]
    fn reference_text_reads_like_a_finding() {
        let (_, _, text) = make_phantom(&spec(&["hypodense", "ill-defined"], 2)).unwrap();
        assert_eq!(text, "a hypodense ill-defined lesion in the liver");
    }

    #[test]
    fn healthy_matches_phantom_far_from_lesion() {
        let s = spec(&["hyperenhancing"], 5);
        let (v, m, _) = make_phantom(&s).unwrap();
        let h = make_healthy(Organ::Liver, s.shape, 5).unwrap();
        let far = m.dilated().dilated().dilated().dilated();
        for i in 0..v.data().len() {
            if far.data()[i] == 0 {
                assert_eq!(v.data()[i], h.data()[i]);
            }
        }
    }
}
