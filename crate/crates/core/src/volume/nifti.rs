//! Read-only NIfTI-1 ingestion for single-file (`.nii`) single-frame volumes.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Dims, Spacing, Volume};
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;

struct Header {
    dims: Dims,
    spacing: Spacing,
    datatype: i16,
    vox_offset: usize,
    slope: f32,
    inter: f32,
}

fn parse<E: ByteOrder>(b: &[u8]) -> Result<Header> {
    let mut dim = [0i16; 8];
    for (k, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&b[40 + 2 * k..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("invalid dim[0] = {ndim}")));
    }
    if (4..=ndim as usize).any(|k| dim[k] > 1) {
        return Err(Error::Format("only single-frame volumes are supported".into()));
    }
    let extent = |k: usize| -> Result<usize> {
        if k > ndim as usize {
            return Ok(1);
        }
        usize::try_from(dim[k])
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Format(format!("dim[{k}] = {} is not positive", dim[k])))
    };
    let (nx, ny, nz) = (extent(1)?, extent(2)?, extent(3)?);
    let mut pixdim = [0f32; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&b[76 + 4 * k..]);
    }
    let spacing_of = |k: usize| -> f64 {
        let v = pixdim[k].abs() as f64;
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    };
    let vox_offset = E::read_f32(&b[108..]);
    if !(vox_offset >= HEADER_LEN as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} inside header")));
    }
    Ok(Header {
        dims: Dims::new(nz, ny, nx),
        spacing: Spacing([spacing_of(3), spacing_of(2), spacing_of(1)]),
        datatype: E::read_i16(&b[70..]),
        vox_offset: vox_offset as usize,
        slope: E::read_f32(&b[112..]),
        inter: E::read_f32(&b[116..]),
    })
}

fn decode<E: ByteOrder>(datatype: i16, payload: &[u8], n: usize) -> Result<Vec<f64>> {
    let width = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
    };
    if payload.len() < n * width {
        return Err(Error::Corruption(format!(
            "payload holds {} bytes, {} voxels need {}",
            payload.len(),
            n,
            n * width
        )));
    }
    let p = &payload[..n * width];
    Ok(match datatype {
        2 => p.iter().map(|&v| v as f64).collect(),
        4 => p.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        512 => p.chunks_exact(2).map(|c| E::read_u16(c) as f64).collect(),
        8 => p.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        16 => p.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        _ => p.chunks_exact(8).map(E::read_f64).collect(),
    })
}

/// Reads a `.nii` file, applying `scl_slope`/`scl_inter` when the slope is nonzero.
/// NIfTI's x/y/z axes map onto W/H/D.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let little = LittleEndian::read_i32(&bytes) == HEADER_LEN as i32;
    let big = BigEndian::read_i32(&bytes) == HEADER_LEN as i32;
    let header = match (little, big) {
        (true, _) => parse::<LittleEndian>(&bytes)?,
        (_, true) => parse::<BigEndian>(&bytes)?,
        _ => return Err(Error::Format("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format("only single-file NIfTI (magic n+1) is supported".into()));
    }
    let n = header.dims.len();
    let payload = bytes
        .get(header.vox_offset..)
        .ok_or_else(|| Error::Corruption("vox_offset beyond end of file".into()))?;
    let raw = if little {
        decode::<LittleEndian>(header.datatype, payload, n)?
    } else {
        decode::<BigEndian>(header.datatype, payload, n)?
    };
    let (slope, inter) = if header.slope != 0.0 && header.slope.is_finite() {
        (header.slope as f64, header.inter as f64)
    } else {
        (1.0, 0.0)
    };
    let data = raw.into_iter().map(|v| (v * slope + inter) as f32).collect();
    Volume::new(data, header.dims, header.spacing, false)
}
