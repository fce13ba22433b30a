//! Named parameter tensors and the binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "S2CCKPT\0"
//! version      u32
//! output_dim   u64
//! count        u32
//! manifest     count x { name_len u16, name utf8, rank u8, dims u64 x rank }
//! payload      f64 LE for every tensor, manifest order, row-major
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Callback receiving `(name, shape, data)` for each tensor.
pub type TensorVisitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// A parameter container whose tensors can be visited in a fixed order.
///
/// The same types double as gradient accumulators, so the optimizer can zip
/// params and grads tensor by tensor.
pub trait Tensors {
    fn visit(&self, f: &mut TensorVisitor<'_>);
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// Overwrite every tensor from a flat vector in visit order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat length mismatch");
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, data| data.fill(value));
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit(&mut |name, _, data| {
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub output_dim: usize,
    pub tensors: Vec<TensorRecord>,
}

pub const MAGIC: &[u8; 8] = b"S2CCKPT\0";
pub const VERSION: u32 = 1;

impl Archive {
    pub fn new(output_dim: usize) -> Self {
        Archive {
            output_dim,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(TensorRecord {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Vec::new(), vec![value]);
    }

    /// Append every tensor of `params`, names prefixed with `prefix.`.
    pub fn push_all(&mut self, prefix: &str, params: &impl Tensors) {
        params.visit(&mut |name, shape, data| {
            self.push(format!("{prefix}.{name}"), shape.to_vec(), data.to_vec());
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        match t.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::format("checkpoint", format!("{name} is not a scalar"))),
        }
    }

    /// Fill `params` (already allocated with the right shapes) from tensors
    /// named `prefix.*`.
    pub fn load_into(&self, prefix: &str, params: &mut impl Tensors) -> Result<()> {
        let mut failure = None;
        params.visit_mut(&mut |name, data| {
            if failure.is_some() {
                return;
            }
            let full = format!("{prefix}.{name}");
            match self.get(&full) {
                Ok(t) if t.data.len() == data.len() => data.copy_from_slice(&t.data),
                Ok(t) => {
                    failure = Some(Error::format(
                        "checkpoint",
                        format!("{full}: expected {} values, found {}", data.len(), t.data.len()),
                    ))
                }
                Err(e) => failure = Some(e),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.output_dim as u64).to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::format("checkpoint", "tensor name too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let output_dim = read_u64(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0])
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push(TensorRecord { name, shape, data });
        }
        Ok(Archive { output_dim, tensors })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut a = Archive::new(3);
        a.push("w", vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]);
        a.push_scalar("stage", 2.0);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let back = Archive::read(buf.as_slice()).unwrap();
        assert_eq!(back.output_dim, 3);
        for (x, y) in a.tensors.iter().zip(&back.tensors) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Archive::read(&b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
