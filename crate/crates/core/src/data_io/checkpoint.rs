//! Versioned model checkpoint container.
//!
//! ```text
//! "EMOC" | version u32 | kind (u32 len + UTF-8)
//! n_dims u32  { name, value u64 }*
//! n_scalars u32 { name, value f64 }*
//! n_tensors u32 { name, rows u32, cols u32, f64[rows*cols] }*
//! ```

use std::fs;
use std::path::Path;

use super::binio::{put_f64s, put_str, put_u32, put_u64, to_u32, Reader};
use crate::error::{Error, Result};
use crate::numcore::{ParamSet, Tensor2};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMOC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub dims: Vec<(String, u64)>,
    pub scalars: Vec<(String, f64)>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            dims: Vec::new(),
            scalars: Vec::new(),
            params: ParamSet::new(),
        }
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v as usize)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks dim '{name}'", self.kind)))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| {
                Error::Format(format!("{} checkpoint lacks scalar '{name}'", self.kind))
            })
    }

    /// Fails with an incompatibility error unless dim `name` equals `expected`.
    pub fn expect_dim(&self, name: &str, expected: usize) -> Result<()> {
        let found = self.dim(name)?;
        if found != expected {
            return Err(Error::Incompatible {
                expected: format!("{name}={expected}"),
                found: format!("{name}={found} in {} checkpoint", self.kind),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.kind);
        put_u32(&mut out, to_u32(self.dims.len(), "dim count")?);
        for (name, v) in &self.dims {
            put_str(&mut out, name);
            put_u64(&mut out, *v);
        }
        put_u32(&mut out, to_u32(self.scalars.len(), "scalar count")?);
        for (name, v) in &self.scalars {
            put_str(&mut out, name);
            put_u64(&mut out, v.to_bits());
        }
        put_u32(&mut out, to_u32(self.params.len(), "tensor count")?);
        for p in self.params.iter() {
            put_str(&mut out, &p.name);
            put_u32(&mut out, to_u32(p.value.rows(), "rows")?);
            put_u32(&mut out, to_u32(p.value.cols(), "cols")?);
            put_f64s(&mut out, p.value.data());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let kind = r.string("kind")?;
        let n_dims = r.u32("dim count")?;
        let mut dims = Vec::new();
        for _ in 0..n_dims {
            dims.push((r.string("dim name")?, r.u64("dim value")?));
        }
        let n_scalars = r.u32("scalar count")?;
        let mut scalars = Vec::new();
        for _ in 0..n_scalars {
            scalars.push((r.string("scalar name")?, r.f64("scalar value")?));
        }
        let n_tensors = r.u32("tensor count")?;
        let mut params = ParamSet::new();
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let data = r.f64s(rows * cols, &name)?;
            params.push(name, Tensor2::from_vec(rows, cols, data)?);
        }
        r.expect_end()?;
        Ok(Self {
            kind,
            dims,
            scalars,
            params,
        })
    }
}

/// A model that can be stored in a [`Checkpoint`].
pub trait CheckpointModel: Sized {
    const KIND: &'static str;

    fn to_checkpoint(&self) -> Checkpoint;

    /// Rebuilds the model; `ck.kind` has already been checked.
    fn from_checkpoint(ck: Checkpoint) -> Result<Self>;
}

pub fn save_checkpoint<M: CheckpointModel>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model.to_checkpoint().to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn load_checkpoint<M: CheckpointModel>(path: impl AsRef<Path>) -> Result<M> {
    checkpoint_into(read_checkpoint(path)?)
}

pub fn checkpoint_into<M: CheckpointModel>(ck: Checkpoint) -> Result<M> {
    if ck.kind != M::KIND {
        return Err(Error::Incompatible {
            expected: format!("kind {}", M::KIND),
            found: format!("kind {}", ck.kind),
        });
    }
    M::from_checkpoint(ck)
}

/// Copies checkpoint tensors into `params`, checking names and shapes.
pub(crate) fn restore_params(kind: &str, into: &mut ParamSet, from: &ParamSet) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Incompatible {
            expected: format!("{} tensors", into.len()),
            found: format!("{} tensors in {kind} checkpoint", from.len()),
        });
    }
    for (dst, src) in into.entries_mut().iter_mut().zip(from.iter()) {
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(Error::Incompatible {
                expected: format!("{} {:?}", dst.name, dst.value.shape()),
                found: format!("{} {:?}", src.name, src.value.shape()),
            });
        }
        dst.value = src.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("Demo");
        ck.dims.push(("d_a".into(), 4));
        ck.scalars.push(("ratio".into(), 0.15));
        ck.params.push("w", Tensor2::from_vec(2, 2, vec![1.0, -0.0, 1e-300, 3.5]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "Demo");
        assert!(back.params.values_bitwise_eq(&ck.params));
        assert_eq!(back.scalar("ratio").unwrap().to_bits(), 0.15f64.to_bits());
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version 2"), "{err}");
    }

    #[test]
    fn dim_mismatch_names_both_sides() {
        let err = sample().expect_dim("d_a", 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d_a=8") && msg.contains("d_a=4"), "{msg}");
    }
}
