//! Named-tensor checkpoints.
//!
//! Byte layout (little-endian):
//!
//! ```text
//! magic    "HDCK"
//! version  u32 = 1
//! count    u32                     number of tensors
//! count x {
//!     name_len u32, name (UTF-8, name_len bytes)
//!     rows u64, cols u64
//!     data rows*cols x f64         row-major
//! }
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use crate::binio::*;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn take(&self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        let v = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
        if v.dim() != shape {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", v.dim())));
        }
        Ok(v.clone())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"HDCK")?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u64(w, t.nrows() as u64)?;
            write_u64(w, t.ncols() as u64)?;
            for &v in t.iter() {
                write_f64(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, b"HDCK", "checkpoint")?;
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rows = read_u64(r)? as usize;
            let cols = read_u64(r)? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is implausibly large")))?;
            let data = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
            let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_and_lookup() {
        let mut ck = Checkpoint::default();
        ck.push("a.weight", array![[1.0, 2.0], [3.0, -4.5]]);
        ck.push("b", Array2::zeros((0, 3)));
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(back.take("a.weight", (2, 2)).is_ok());
        assert!(back.take("a.weight", (1, 4)).is_err());
        assert!(back.take("missing", (1, 1)).is_err());
        assert!(Checkpoint::read(&mut &b"XXXX"[..]).is_err());
    }
}
