//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DMIMCKPT" | u32 version
//! str config
//! u32 n, n x (str name, u64 value)             counters
//! u32 n, n x (str name, f64 value)             scalars
//! u32 n, n x (str name, u32 ndim, ndim x u64, f32 payload)   tensors
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use crate::autodiff::{AdamWState, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DMIMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub counters: Vec<(String, u64)>,
    pub scalars: Vec<(String, f64)>,
    pub tensors: Vec<NamedTensor>,
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated at byte {}: wanted {n} more bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.counters.len() as u32).to_le_bytes());
        for (k, v) in &self.counters {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (k, v) in &self.scalars {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.str()?;
        let mut ck = Checkpoint {
            config,
            ..Default::default()
        };
        for _ in 0..r.u32()? {
            let k = r.str()?;
            ck.counters.push((k, r.u64()?));
        }
        for _ in 0..r.u32()? {
            let k = r.str()?;
            ck.scalars.push((k, f64::from_bits(r.u64()?)));
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("absurd shape for `{name}`")))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            ck.tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.counters
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing counter `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar `{name}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}/{name}"),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    /// Overwrites every parameter of `store` from `prefix/<name>` records,
    /// checking names, shapes and count.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let p = format!("{prefix}/");
        let count = self.tensors.iter().filter(|t| t.name.starts_with(&p)).count();
        if count != store.len() {
            return Err(Error::Checkpoint(format!(
                "`{prefix}` holds {count} tensors, the model has {}",
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            let rec = self.tensor(&format!("{p}{name}"))?;
            let t = store.get_mut(id);
            if rec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{p}{name}` has shape {:?}, the model expects {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }

    pub fn push_optimizer(&mut self, prefix: &str, store: &ParamStore, opt: &AdamWState) {
        self.counters.push((format!("{prefix}/step"), opt.step));
        for (i, (_, name, t)) in store.iter().enumerate() {
            for (kind, buf) in [("m", &opt.first_moment[i]), ("v", &opt.second_moment[i])] {
                self.tensors.push(NamedTensor {
                    name: format!("{prefix}.{kind}/{name}"),
                    shape: t.shape().to_vec(),
                    data: buf.clone(),
                });
            }
        }
    }

    pub fn restore_optimizer(&self, prefix: &str, store: &ParamStore, opt: &mut AdamWState) -> Result<()> {
        opt.step = self.counter(&format!("{prefix}/step"))?;
        for (i, (_, name, t)) in store.iter().enumerate() {
            for (kind, buf) in [("m", &mut opt.first_moment[i]), ("v", &mut opt.second_moment[i])] {
                let rec = self.tensor(&format!("{prefix}.{kind}/{name}"))?;
                if rec.shape != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
                }
                buf.copy_from_slice(&rec.data);
            }
        }
        Ok(())
    }
}
