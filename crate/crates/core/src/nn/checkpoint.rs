//! Versioned weight container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "TSCKPT\0\0"
//! version  u32      1
//! config   u32 length + UTF-8 JSON
//! count    u32
//! count x { name: u16 length + UTF-8, ndim: u8, dims: ndim x u32, data: numel x f32 }
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&self.config).expect("json value serializes");
        push_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(&cfg);
        push_u32(&mut out, self.arrays.len() as u32);
        for (name, t) in &self.arrays {
            let mut b = [0u8; 2];
            LittleEndian::write_u16(&mut b, name.len() as u16);
            out.extend_from_slice(&b);
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                push_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                let mut b = [0u8; 4];
                LittleEndian::write_f32(&mut b, v as f32);
                out.extend_from_slice(&b);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = LittleEndian::read_u16(r.take(2)?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_owned();
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect();
            arrays.push((name, Tensor::new(shape, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    let mut b = [0u8; 4];
    LittleEndian::write_u32(&mut b, v);
    out.extend_from_slice(&b);
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::Corruption(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let ck = Checkpoint {
            config: serde_json::json!({"channels": 4}),
            arrays: vec![
                ("a.weight".into(), Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3f32 as f64])),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(bytes, ck.to_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Corruption(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Format(_)) | Err(Error::Corruption(_))));
    }
}
