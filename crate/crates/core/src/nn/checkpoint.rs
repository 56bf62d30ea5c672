//! Versioned checkpoint files: a JSON header followed by named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "IDIFCKPT"
//! version   u32      currently 1
//! kind      u32 length + UTF-8   e.g. "denoiser", "predictor"
//! header    u32 length + UTF-8 JSON (model config, normalization, ...)
//! count     u32
//! tensors   count × { u32 name length, name, u32 rank, rank × u64 dims,
//!                     product(dims) × f64 }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;

use super::{device, ParamStore};
use crate::binary::{put_f64, put_str, put_u32, put_u64, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IDIFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, header: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            header,
            tensors: store
                .named()
                .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.header.to_string());
        put_u32(&mut buf, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.rank() as u32);
            for d in t.dims() {
                put_u64(&mut buf, *d as u64);
            }
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                put_f64(&mut buf, v);
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut c = Reader::new(data);
        if c.take(8, "magic")? != MAGIC {
            return Err(Error::parse("byte 0", "not a checkpoint file"));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let kind = c.string("kind")?;
        let header_pos = c.pos;
        let header = serde_json::from_str(&c.string("header")?)
            .map_err(|e| Error::parse(format!("byte {header_pos}"), format!("header JSON: {e}")))?;
        let count = c.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = c.string("tensor name")?;
            let rank = c.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| c.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::parse(&name, "tensor too large"))?, &name)?;
            let values = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect::<Vec<_>>();
            tensors.insert(name, Tensor::from_vec(values, dims, &device())?);
        }
        c.finish()?;
        Ok(Self {
            kind,
            header,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut ps = ParamStore::new(4);
        ps.uniform("a.weight", &[3, 2], 1.0).unwrap();
        ps.constant("b", &[4], 0.5).unwrap();
        let ck = Checkpoint::from_store("toy", serde_json::json!({"width": 3}), &ps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "toy");
        assert_eq!(back.header["width"], 3);
        let other = ParamStore::new(99);
        let mut other = other;
        other.uniform("a.weight", &[3, 2], 1.0).unwrap();
        other.constant("b", &[4], 0.0).unwrap();
        other.load(&back.tensors).unwrap();
        let a: Vec<f64> = other.get("a.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = ps.get("a.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);

        let bytes = std::fs::read(&path).unwrap();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut wrong = bytes.clone();
        wrong[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version { .. })));
    }
}
