//! Volumes, tumor masks and everything that touches raw voxels: file
//! formats, intensity preprocessing, patch extraction, mask magnification
//! and the procedural phantom generator used as desk-scale training data.

mod io;
mod nifti;
mod ops;
pub mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_volume, load_mask, save_mask, save_volume, VolumeFormat};
pub use nifti::read_nifti;
pub use ops::{
    boundary_profile, crop_patch, crop_patch_at, magnify_mask, preprocess, rescale_clipped,
    resample_isotropic, BoundaryProfile, HU_MAX, HU_MIN,
};
pub use phantom::{make_healthy, make_phantom, PhantomSpec};

/// Grid extents in voxels, ordered depth, height, width (W fastest in memory).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { d: n, h: n, w: n }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        [z, y, x]
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    pub fn fits_within(&self, other: &Dims) -> bool {
        self.d <= other.d && self.h <= other.h && self.w <= other.w
    }

    /// 26-connected neighbours of voxel `i` that lie inside the grid.
    pub fn neighbors26(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let [z, y, x] = self.coords(i);
        let (z, y, x) = (z as isize, y as isize, x as isize);
        (-1isize..=1)
            .flat_map(|dz| (-1isize..=1).flat_map(move |dy| (-1isize..=1).map(move |dx| (dz, dy, dx))))
            .filter(|&(dz, dy, dx)| (dz, dy, dx) != (0, 0, 0))
            .filter_map(move |(dz, dy, dx)| {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                (nz >= 0
                    && ny >= 0
                    && nx >= 0
                    && (nz as usize) < self.d
                    && (ny as usize) < self.h
                    && (nx as usize) < self.w)
                    .then(|| self.index(nz as usize, ny as usize, nx as usize))
            })
    }

    /// Face (6-connected) neighbours.
    pub fn neighbors6(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let [z, y, x] = self.coords(i);
        const STEPS: [(isize, isize, isize); 6] =
            [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        STEPS.iter().filter_map(move |&(dz, dy, dx)| {
            let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            (nz >= 0
                && ny >= 0
                && nx >= 0
                && (nz as usize) < self.d
                && (ny as usize) < self.h
                && (nx as usize) < self.w)
                .then(|| self.index(nz as usize, ny as usize, nx as usize))
        })
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Physical voxel size in millimetres, same axis order as [`Dims`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub const ISOTROPIC_1MM: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn new(d: f64, h: f64, w: f64) -> Result<Self> {
        let s = Spacing([d, h, w]);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("spacing must be positive, got {:?}", self.0)))
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0.iter().product()
    }
}

/// A CT volume or patch. Intensities are HU until [`preprocess`] maps them
/// onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: Dims,
    spacing: Spacing,
    normalized: bool,
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: Dims, spacing: Spacing, normalized: bool) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill a {dims} grid",
                data.len()
            )));
        }
        spacing.validate()?;
        if normalized {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!(
                    "normalized volume holds out-of-range value {v}"
                )));
            }
        }
        Ok(Volume {
            data,
            dims,
            spacing,
            normalized,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32, normalized: bool) -> Result<Self> {
        Volume::new(vec![value; dims.len()], dims, spacing, normalized)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// `(1 - m) * x`: the volume with the masked region zeroed.
    pub fn masked_out(&self, mask: &TumorMask) -> Result<Volume> {
        check_aligned(self, mask)?;
        let data = self
            .data
            .iter()
            .zip(mask.data())
            .map(|(&v, &m)| if m != 0 { 0.0 } else { v })
            .collect();
        Ok(Volume { data, ..self.clone() })
    }

    pub fn mean_where(&self, mask: &TumorMask, inside: bool) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| (m != 0) == inside)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub(crate) fn with_data(&self, data: Vec<f32>, normalized: bool) -> Volume {
        debug_assert_eq!(data.len(), self.dims.len());
        Volume {
            data,
            dims: self.dims,
            spacing: self.spacing,
            normalized,
        }
    }
}

/// Binary tumor mask aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TumorMask {
    data: Vec<u8>,
    dims: Dims,
}

impl TumorMask {
    pub fn new(data: Vec<u8>, dims: Dims) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} mask values do not fill a {dims} grid",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(TumorMask { data, dims })
    }

    pub fn empty(dims: Dims) -> Self {
        TumorMask {
            data: vec![0; dims.len()],
            dims,
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = vec![0u8; dims.len()];
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data[dims.index(z, y, x)] = f(z, y, x) as u8;
                }
            }
        }
        TumorMask { data, dims }
    }

    pub fn from_indices(dims: Dims, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = TumorMask::empty(dims);
        for i in indices {
            m.data[i] = 1;
        }
        m
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.dims.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.dims.index(z, y, x);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
    }

    /// Inclusive bounding box `(min, max)` in voxel coordinates.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut it = self.indices().map(|i| self.dims.coords(i));
        let first = it.next()?;
        Some(it.fold((first, first), |(mut lo, mut hi), c| {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            (lo, hi)
        }))
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for i in self.indices() {
            let c = self.dims.coords(i);
            for a in 0..3 {
                acc[a] += c[a] as f64;
            }
            n += 1;
        }
        (n > 0).then(|| acc.map(|v| v / n as f64))
    }

    /// Diameter of the sphere with the same physical volume, in mm.
    pub fn equivalent_diameter_mm(&self, spacing: Spacing) -> f64 {
        equivalent_diameter(self.count() as f64 * spacing.voxel_volume())
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn union(&self, other: &TumorMask) -> Result<TumorMask> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn intersection(&self, other: &TumorMask) -> Result<TumorMask> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &TumorMask) -> Result<TumorMask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    fn zip_with(&self, other: &TumorMask, f: impl Fn(u8, u8) -> u8) -> Result<TumorMask> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("mask {} vs {}", self.dims, other.dims)));
        }
        Ok(TumorMask {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            dims: self.dims,
        })
    }

    /// One step of 6-connected binary erosion (grid border counts as outside).
    pub fn eroded(&self) -> TumorMask {
        let dims = self.dims;
        let data = (0..dims.len())
            .map(|i| {
                let [z, y, x] = dims.coords(i);
                let interior = z > 0
                    && y > 0
                    && x > 0
                    && z + 1 < dims.d
                    && y + 1 < dims.h
                    && x + 1 < dims.w;
                (self.data[i] != 0 && interior && dims.neighbors6(i).all(|j| self.data[j] != 0))
                    as u8
            })
            .collect();
        TumorMask { data, dims }
    }

    /// One step of 6-connected binary dilation.
    pub fn dilated(&self) -> TumorMask {
        let dims = self.dims;
        let data = (0..dims.len())
            .map(|i| (self.data[i] != 0 || dims.neighbors6(i).any(|j| self.data[j] != 0)) as u8)
            .collect();
        TumorMask { data, dims }
    }
}

/// `d = 2 (3V / 4pi)^(1/3)`.
pub fn equivalent_diameter(volume_mm3: f64) -> f64 {
    2.0 * (3.0 * volume_mm3 / (4.0 * std::f64::consts::PI)).cbrt()
}

pub(crate) fn check_aligned(v: &Volume, m: &TumorMask) -> Result<()> {
    if v.dims() != m.dims() {
        return Err(Error::Shape(format!(
            "volume {} and mask {} are not aligned",
            v.dims(),
            m.dims()
        )));
    }
    Ok(())
}
