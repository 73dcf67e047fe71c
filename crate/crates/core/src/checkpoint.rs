//! Flat binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RFO1"  u32 version  u32 count
//! count x { u32 name_len  name (UTF-8)  u32 rank  rank x u64 dim  prod(dims) x f64 }
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFO1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn matrix(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: vec![t.rows(), t.cols()],
            data: t.data().to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: vec![],
            data: vec![value],
        }
    }

    pub fn vector(name: impl Into<String>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Tensor, CheckpointError> {
        match self.dims.as_slice() {
            [r, c] => Ok(Tensor::from_vec(*r, *c, self.data.clone())),
            _ => Err(CheckpointError::Shape {
                name: self.name.clone(),
                expected: vec![0, 0],
                found: self.dims.clone(),
            }),
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor, CheckpointError> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[NamedTensor::scalar("s", 1.5)]).unwrap();
        assert_eq!(&buf[..4], b"RFO1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b's');
        assert_eq!(&buf[17..21], &0u32.to_le_bytes());
        assert_eq!(&buf[21..29], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 29);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(read_checkpoint(&buf[..]), Err(CheckpointError::Magic(_))));
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..4, cols in 0usize..4, seed in any::<u64>(), name in "[a-z.0-9]{1,12}") {
            let data: Vec<f64> = (0..rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin() * 1e3).collect();
            let t = NamedTensor { name, dims: vec![rows, cols], data };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, std::slice::from_ref(&t)).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back, vec![t]);
        }
    }
}
