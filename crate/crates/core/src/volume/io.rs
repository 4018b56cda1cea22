//! Native on-disk volume format.
//!
//! A volume `name` is stored as two files: `name.hdr`, a `key=value` text
//! header, and `name.raw`, the voxels as little-endian `float32` in D, H, W
//! order with W varying fastest.
//!
//! ```text
//! shape=32,32,32
//! spacing=1,1,1
//! dtype=float32
//! order=DHW
//! endianness=little
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};

use super::{Dims, Spacing, TumorMask, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Native,
    Nifti,
}

pub(crate) fn header_path(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

pub(crate) fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

/// Loads HU intensities; the result is never marked normalized.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Native => load_native(path),
        VolumeFormat::Nifti => super::nifti::read_nifti(path),
    }
}

fn load_native(path: &Path) -> Result<Volume> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let (dims, spacing) = parse_header(&text)?;
    let raw_path = payload_path(path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = dims.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "{}: header declares {dims} ({expected} bytes) but payload holds {} bytes",
            raw_path.display(),
            bytes.len()
        )));
    }
    let mut data = vec![0f32; dims.len()];
    LittleEndian::read_f32_into(&bytes, &mut data);
    Volume::new(data, dims, spacing, false)
}

fn parse_header(text: &str) -> Result<(Dims, Spacing)> {
    let mut shape = None;
    let mut spacing = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("header line {}: expected key=value", n + 1)))?;
        let value = value.trim();
        match key.trim() {
            "shape" => {
                let v = parse_triple::<usize>(value, "shape")?;
                if v.contains(&0) {
                    return Err(Error::Format("shape components must be positive".into()));
                }
                shape = Some(Dims::from_array(v));
            }
            "spacing" => {
                let v = parse_triple::<f64>(value, "spacing")?;
                spacing = Some(Spacing(v));
            }
            "dtype" => require(value, "float32", "dtype")?,
            "order" => require(value, "DHW", "order")?,
            "endianness" => require(value, "little", "endianness")?,
            other => return Err(Error::Format(format!("unknown header key `{other}`"))),
        }
    }
    let shape = shape.ok_or_else(|| Error::Format("header missing `shape`".into()))?;
    let spacing = spacing.ok_or_else(|| Error::Format("header missing `spacing`".into()))?;
    spacing
        .validate()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((shape, spacing))
}

fn require(value: &str, expected: &str, key: &str) -> Result<()> {
    if value == expected {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported {key} `{value}` (expected {expected})")))
    }
}

fn parse_triple<T: std::str::FromStr>(value: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Format(format!("cannot parse {key} `{value}`")))?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::Format(format!("{key} needs three components")))
}

fn render_header(dims: Dims, spacing: Spacing) -> String {
    let [sd, sh, sw] = spacing.0;
    format!(
        "shape={},{},{}\nspacing={sd},{sh},{sw}\ndtype=float32\norder=DHW\nendianness=little\n",
        dims.d, dims.h, dims.w
    )
}

fn write_pair(path: &Path, dims: Dims, spacing: Spacing, data: &[f32]) -> Result<()> {
    let hdr_path = header_path(path);
    fs::write(&hdr_path, render_header(dims, spacing)).map_err(|e| Error::io(&hdr_path, e))?;
    let mut bytes = vec![0u8; data.len() * 4];
    LittleEndian::write_f32_into(data, &mut bytes);
    let raw_path = payload_path(path);
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Writes the volume's raw values (HU or normalized, as held).
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_pair(path, v.dims(), v.spacing(), v.data())
}

/// Masks share the volume container; voxels are stored as 0.0 / 1.0.
pub fn save_mask(m: &TumorMask, spacing: Spacing, path: &Path) -> Result<()> {
    let data: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
    write_pair(path, m.dims(), spacing, &data)
}

pub fn load_mask(path: &Path) -> Result<(TumorMask, Spacing)> {
    let v = load_native(path)?;
    let data = v
        .data()
        .iter()
        .map(|&x| match x {
            x if x == 0.0 => Ok(0u8),
            x if x == 1.0 => Ok(1u8),
            other => Err(Error::Corruption(format!("mask voxel {other} is not binary"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((TumorMask::new(data, v.dims())?, v.spacing()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros");
        fs::write(header_path(&p), render_header(Dims::cube(4), Spacing::ISOTROPIC_1MM)).unwrap();
        fs::write(payload_path(&p), vec![0u8; 64 * 4]).unwrap();
        let v = load_volume(&p, VolumeFormat::Native).unwrap();
        assert_eq!(v.data().len(), 64);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(!v.is_normalized());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rand.raw");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..512).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
        let v = Volume::new(data, Dims::cube(8), Spacing([0.7, 0.8, 2.5]), false).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p, VolumeFormat::Native).unwrap();
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.spacing(), v.spacing());
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc");
        fs::write(header_path(&p), render_header(Dims::cube(8), Spacing::ISOTROPIC_1MM)).unwrap();
        fs::write(payload_path(&p), vec![0u8; 7 * 7 * 7 * 4]).unwrap();
        let err = load_volume(&p, VolumeFormat::Native).unwrap_err();
        assert!(matches!(err, Error::Corruption(_)), "{err}");
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(header_path(&p), "shape=4,4\nspacing=1,1,1\n").unwrap();
        fs::write(payload_path(&p), vec![0u8; 64]).unwrap();
        assert!(matches!(load_volume(&p, VolumeFormat::Native), Err(Error::Format(_))));
        fs::write(header_path(&p), "shape=4,4,4\nspacing=1,1,1\ndtype=int16\n").unwrap();
        assert!(matches!(load_volume(&p, VolumeFormat::Native), Err(Error::Format(_))));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask");
        let m = TumorMask::from_fn(Dims::cube(5), |z, y, x| z + y + x == 6);
        save_mask(&m, Spacing::ISOTROPIC_1MM, &p).unwrap();
        let (back, _) = load_mask(&p).unwrap();
        assert_eq!(back, m);
    }
}
