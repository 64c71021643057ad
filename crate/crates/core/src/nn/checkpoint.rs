//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "WLCK" | u32 version | u32 header_len | header (JSON, UTF-8)
//! u32 n_tensors | per tensor: u32 layer | u32 ndim | u64 dims[ndim] | f64 values[..]
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub layer: u32,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&t.layer.to_le_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header = serde_json::from_slice(&header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = read_u32(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                values.push(f64::from_le_bytes(b));
            }
            tensors.push(TensorRecord {
                layer,
                shape,
                values,
            });
        }
        Ok(Self { header, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    /// SHA-256 over the tensor payload only, as lowercase hex.
    pub fn tensor_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.layer.to_le_bytes());
            for &d in &t.shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in &t.values {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
