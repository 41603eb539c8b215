//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VCAC"                       4 bytes
//! version                      u32
//! config length, config text   u32, UTF-8 bytes
//! repeated until end of file:
//!   name length, name          u32, UTF-8 bytes
//!   rank                       u32
//!   dims                       rank x u64
//!   values                     prod(dims) x f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, VcaError};
use crate::tensor::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"VCAC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(config: &str, store: &ParamStore<T>) -> Self {
        Checkpoint {
            config: config.to_owned(),
            tensors: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.cast()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected \"VCAC\""));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims_at = r.pos;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.error(dims_at as u64, format!("implausible dims {dims:?}")))?;
            let raw = r.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.error(dims_at as u64, e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies the stored values into a store with matching names and shapes.
    pub fn restore_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(VcaError::Usage(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for ((name, t), entry) in self.tensors.iter().zip(store.entries_mut()) {
            if *name != entry.name || t.shape() != entry.value.shape() {
                return Err(VcaError::Usage(format!(
                    "checkpoint tensor {name} {:?} does not match model {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = t.cast();
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: u64, msg: impl Into<String>) -> VcaError {
        VcaError::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos as u64,
                format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos as u64;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.error(at, "invalid UTF-8"))
    }
}
