use super::{check_aligned, Dims, Spacing, TumorMask, Volume};
use crate::error::{Error, Result};

/// Lower HU clip bound applied before normalization.
pub const HU_MIN: f64 = -175.0;
/// Upper HU clip bound applied before normalization.
pub const HU_MAX: f64 = 250.0;

/// Clip to `[lo, hi]` then map affinely onto `[0, 1]`.
#[inline]
pub fn rescale_clipped(v: f64, lo: f64, hi: f64) -> f64 {
    (v.clamp(lo, hi) - lo) / (hi - lo)
}

/// HU window `[-175, 250]` mapped onto `[0, 1]`.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    if v.is_normalized() {
        return Err(Error::Contract("volume is already normalized".into()));
    }
    let data = v
        .data()
        .iter()
        .map(|&x| rescale_clipped(x as f64, HU_MIN, HU_MAX) as f32)
        .collect();
    Ok(v.with_data(data, true))
}

/// Inverse of the normalization map (within the window).
pub(crate) fn to_hu(v: f64) -> f64 {
    v * (HU_MAX - HU_MIN) + HU_MIN
}

fn extract<T: Copy>(src: &[T], dims: Dims, start: [usize; 3], size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(size.len());
    for z in 0..size.d {
        for y in 0..size.h {
            let row = dims.index(start[0] + z, start[1] + y, start[2]);
            out.extend_from_slice(&src[row..row + size.w]);
        }
    }
    out
}

/// Crops a `size` patch centred on `center`, shifted to stay within bounds.
pub fn crop_patch_at(
    v: &Volume,
    m: &TumorMask,
    center: [usize; 3],
    size: Dims,
) -> Result<(Volume, TumorMask)> {
    check_aligned(v, m)?;
    let dims = v.dims();
    if !size.fits_within(&dims) || size.is_empty() {
        return Err(Error::Shape(format!("patch {size} does not fit volume {dims}")));
    }
    let (full, want) = (dims.as_array(), size.as_array());
    let start: [usize; 3] = std::array::from_fn(|a| {
        center[a]
            .saturating_sub(want[a] / 2)
            .min(full[a] - want[a])
    });
    let vol = Volume::new(extract(v.data(), dims, start, size), size, v.spacing(), v.is_normalized())?;
    let mask = TumorMask::new(extract(m.data(), dims, start, size), size)?;
    Ok((vol, mask))
}

/// Crops a patch centred on the mask's bounding-box centre.
pub fn crop_patch(v: &Volume, m: &TumorMask, size: Dims) -> Result<(Volume, TumorMask)> {
    let (lo, hi) = m
        .bounding_box()
        .ok_or_else(|| Error::EmptyMask("crop_patch needs a placement center for an empty mask".into()))?;
    let center = std::array::from_fn(|a| (lo[a] + hi[a]).div_ceil(2));
    crop_patch_at(v, m, center, size)
}

/// Scales the mask about its centroid by `factor` using nearest-neighbour
/// inverse mapping. The input mask is always retained.
pub fn magnify_mask(m: &TumorMask, factor: f64) -> Result<TumorMask> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Invalid(format!("magnification factor {factor} must be >= 1")));
    }
    let c = m
        .centroid()
        .ok_or_else(|| Error::EmptyMask("cannot magnify an empty mask".into()))?;
    if factor == 1.0 {
        return Ok(m.clone());
    }
    let dims = m.dims();
    let ext = dims.as_array();
    Ok(TumorMask::from_fn(dims, |z, y, x| {
        if m.get(z, y, x) {
            return true;
        }
        let p = [z, y, x];
        let mut src = [0usize; 3];
        for a in 0..3 {
            let s = (c[a] + (p[a] as f64 - c[a]) / factor).round();
            if s < 0.0 || s >= ext[a] as f64 {
                return false;
            }
            src[a] = s as usize;
        }
        m.get(src[0], src[1], src[2])
    }))
}

/// Trilinear resampling to isotropic `target_mm` voxels (voxel-centre aligned).
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm > 0.0) {
        return Err(Error::Invalid(format!("target spacing {target_mm} must be positive")));
    }
    let dims = v.dims();
    let ext = dims.as_array();
    let sp = v.spacing().0;
    let out_ext: [usize; 3] =
        std::array::from_fn(|a| ((ext[a] as f64 * sp[a] / target_mm).round() as usize).max(1));
    let out_dims = Dims::from_array(out_ext);
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out_ext[a])
            .map(|i| {
                let s = ((i as f64 + 0.5) * target_mm / sp[a] - 0.5).clamp(0.0, (ext[a] - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(ext[a] - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let src = v.data();
    let at = |z: usize, y: usize, x: usize| src[dims.index(z, y, x)] as f64;
    let mut out = Vec::with_capacity(out_dims.len());
    for &(z0, z1, fz) in &az {
        for &(y0, y1, fy) in &ay {
            for &(x0, x1, fx) in &ax {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                out.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32);
            }
        }
    }
    Volume::new(out, out_dims, Spacing([target_mm; 3]), v.is_normalized())
}

/// Intensity statistics around a mask boundary, measured on onion-peel
/// layers obtained by repeated 6-connected erosion (inside) and dilation
/// (outside).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProfile {
    pub tumor_mean: f64,
    pub tumor_sd: f64,
    /// Mean of the deep interior (two erosions in, or shallower if the mask is thin).
    pub core_mean: f64,
    /// Mean of the ring 4..=6 layers outside the mask.
    pub surround_mean: f64,
    /// `(layer, mean)`, negative layers inside the mask.
    pub layers: Vec<(i32, f64)>,
    /// Number of layers within three of the boundary whose normalized
    /// intensity lies strictly between 0.1 and 0.9. `None` when the
    /// core/surround contrast is too low to measure an edge.
    pub transition_width: Option<usize>,
}

impl BoundaryProfile {
    pub fn contrast(&self) -> f64 {
        self.tumor_mean - self.surround_mean
    }
}

/// Minimum core/surround contrast for which an edge width is reported.
pub(crate) const MIN_EDGE_CONTRAST: f64 = 0.08;

pub fn boundary_profile(v: &Volume, m: &TumorMask) -> Result<BoundaryProfile> {
    check_aligned(v, m)?;
    if m.is_empty() {
        return Err(Error::EmptyMask("boundary profile of empty mask".into()));
    }
    let mean_of = |mask: &TumorMask| v.mean_where(mask, true);

    let mut layers = Vec::new();
    let mut inner = vec![m.clone()];
    for k in 1..=3 {
        let next = inner[k - 1].eroded();
        if let Some(mu) = mean_of(&inner[k - 1].difference(&next)?) {
            layers.push((-(k as i32), mu));
        }
        inner.push(next);
    }
    let mut outer = vec![m.clone()];
    for k in 1..=6 {
        let next = outer[k - 1].dilated();
        if k <= 3 {
            if let Some(mu) = mean_of(&next.difference(&outer[k - 1])?) {
                layers.push((k as i32, mu));
            }
        }
        outer.push(next);
    }
    layers.sort_by_key(|l| l.0);

    let core_mean = [&inner[2], &inner[1], &inner[0]]
        .into_iter()
        .find_map(&mean_of)
        .expect("mask is nonempty");
    let ring = outer[6].difference(&outer[3])?;
    let surround_mean = mean_of(&ring)
        .or_else(|| v.mean_where(m, false))
        .unwrap_or(core_mean);

    let vals: Vec<f64> = m.indices().map(|i| v.data()[i] as f64).collect();
    let tumor_mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let tumor_sd = (vals.iter().map(|x| (x - tumor_mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();

    let contrast = core_mean - surround_mean;
    let transition_width = (contrast.abs() >= MIN_EDGE_CONTRAST).then(|| {
        layers
            .iter()
            .filter(|(_, mu)| {
                let t = (mu - surround_mean) / contrast;
                t > 0.1 && t < 0.9
            })
            .count()
    });
    Ok(BoundaryProfile {
        tumor_mean,
        tumor_sd,
        core_mean,
        surround_mean,
        layers,
        transition_width,
    })
}
