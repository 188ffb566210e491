//! Flat binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "FINONET\0"
//! version    u32      1
//! n_dims     u32      number of layer dims (>= 2)
//! dims       u32 × n_dims
//! per layer: weights (in_dim × out_dim, row-major) then bias (out_dim), f64
//! ```
//!
//! Decoding never trusts the header: every size is checked against the
//! remaining bytes before allocating.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Dense, DenseNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FINONET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_DIMS: usize = 64;

impl DenseNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for p in self.to_flat() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Decode("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_dims = cur.u32()? as usize;
        if !(2..=MAX_DIMS).contains(&n_dims) {
            return Err(Error::Decode(format!("invalid layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(Error::Decode("zero layer dim".into()));
            }
            dims.push(d);
        }
        let mut n_params: usize = 0;
        for w in dims.windows(2) {
            n_params = w[0]
                .checked_mul(w[1])
                .and_then(|x| x.checked_add(w[1]))
                .and_then(|x| x.checked_add(n_params))
                .ok_or_else(|| Error::Decode("parameter count overflow".into()))?;
        }
        let expected = n_params
            .checked_mul(8)
            .ok_or_else(|| Error::Decode("parameter count overflow".into()))?;
        if cur.remaining() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} parameter bytes, found {}",
                cur.remaining()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let weights = Array2::from_shape_vec((w[0], w[1]), cur.f64s(w[0] * w[1])?)
                .map_err(|e| Error::Decode(e.to_string()))?;
            let bias = Array1::from_vec(cur.f64s(w[1])?);
            layers.push(Dense { weights, bias });
        }
        DenseNet::from_layers(layers)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Decode("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
