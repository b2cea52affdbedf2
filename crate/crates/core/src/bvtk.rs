//! `BVTK1` binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "BVTK1"            5 bytes magic
//! dtype              1 byte   (0 = f32, 1 = f64)
//! ndim               1 byte
//! dims               ndim x u64
//! payload            product(dims) values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"BVTK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(7 + 8 * shape.len() + dtype.width() * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(u8::try_from(shape.len()).expect("at most 255 dimensions"));
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses a BVTK buffer. `origin` only labels errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < 7 || &bytes[..5] != MAGIC {
        return Err(bad("missing BVTK1 magic".into()));
    }
    let dtype = Dtype::from_code(bytes[5]).ok_or_else(|| bad(format!("unknown dtype {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let header = 7 + 8 * ndim;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for {ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for chunk in bytes[7..header].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| bad("element count overflows".into()))?;
        shape.push(d);
    }
    let expected = count
        .checked_mul(dtype.width())
        .ok_or_else(|| bad("payload size overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} as {dtype:?} needs {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(format!("non-finite value at flat index {i}")));
    }
    Tensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn memory() -> PathBuf {
        PathBuf::from("<memory>")
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]);
        let bytes = encode(&t, Dtype::F64);
        assert_eq!(&bytes[..5], &[0x42, 0x56, 0x54, 0x4B, 0x31]);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &1u64.to_le_bytes());
        assert_eq!(&bytes[15..23], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 23 + 24);
        assert_eq!(&bytes[23..31], &1.0f64.to_le_bytes());
    }

    #[test]
    fn f32_roundtrip_is_lossy_but_close() {
        let t = Tensor::from_rows(&[&[0.1, -2.5]]);
        let back = decode(&encode(&t, Dtype::F32), &memory()).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
        assert_eq!(encode(&t, Dtype::F32).len(), 7 + 16 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::from_rows(&[&[1.0, 2.0]]);
        let good = encode(&t, Dtype::F64);

        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        assert!(decode(&wrong_magic, &memory()).is_err());

        let mut wrong_dtype = good.clone();
        wrong_dtype[5] = 7;
        assert!(decode(&wrong_dtype, &memory()).is_err());

        assert!(decode(&good[..good.len() - 1], &memory()).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode(&long, &memory()).is_err());

        let nan = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(decode(&encode(&nan, Dtype::F64), &memory()).is_err());
    }
}
