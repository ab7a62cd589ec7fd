//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic         8 bytes   "TRJGANCK"
//! version       u32       CHECKPOINT_VERSION
//! config_hash   32 bytes  SHA-256 of the model/training configuration
//! step          u64
//! count         u32       number of tensors
//! count times:
//!   name_len    u32
//!   name        name_len bytes, UTF-8
//!   ndim        u32
//!   dims        ndim x u64
//!   values      prod(dims) x f64
//! ```
//!
//! Tensors are written in lexicographic name order.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJGANCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], step: u64) -> Self {
        Checkpoint {
            config_hash,
            step,
            tensors: BTreeMap::new(),
        }
    }

    pub fn config_hash_hex(&self) -> String {
        hex(&self.config_hash)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    /// Stores values, Adam moments and the update counter under `prefix`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParameterSet) {
        for (name, value) in params.iter() {
            let (m, v) = params.moments(name).expect("moments track values");
            self.tensors
                .insert(format!("{prefix}/{name}"), value.clone());
            self.tensors.insert(format!("{prefix}.m/{name}"), m.clone());
            self.tensors.insert(format!("{prefix}.v/{name}"), v.clone());
        }
        self.tensors.insert(
            format!("{prefix}.step"),
            Tensor::scalar(params.step() as f64),
        );
    }

    /// Overwrites every parameter of `params` from entries under `prefix`.
    pub fn restore_params(&self, prefix: &str, params: &mut ParameterSet) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let mut moments = BTreeMap::new();
        for name in names {
            let fetch = |key: String| {
                self.tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))
            };
            params.set(&name, fetch(format!("{prefix}/{name}"))?)?;
            let m = fetch(format!("{prefix}.m/{name}"))?;
            let v = fetch(format!("{prefix}.v/{name}"))?;
            moments.insert(name, (m, v));
        }
        let step = self
            .tensors
            .get(&format!("{prefix}.step"))
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{prefix}.step`")))?
            .item() as u64;
        params.restore_optimizer(step, moments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{AdamConfig, Gradients};

    #[test]
    fn header_layout_is_fixed() {
        let ck = Checkpoint::new([7; 32], 42);
        let b = ck.to_bytes();
        assert_eq!(&b[..8], b"TRJGANCK");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..44], &[7u8; 32]);
        assert_eq!(&b[44..52], &42u64.to_le_bytes());
        assert_eq!(&b[52..56], &0u32.to_le_bytes());
        assert_eq!(b.len(), 56);
    }

    #[test]
    fn params_and_moments_survive_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::from_fn(&[2, 3], |i| i as f64 / 7.0)).unwrap();
        p.insert("b", Tensor::scalar(-0.1)).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.set("a", Tensor::from_fn(&[2, 3], |i| 1.0 - i as f64)).unwrap();
        p.adam_step(&g, &AdamConfig::default()).unwrap();

        let mut ck = Checkpoint::new([1; 32], 3);
        ck.insert_params("gen", &p);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut q = ParameterSet::new();
        q.insert("a", Tensor::zeros(&[2, 3])).unwrap();
        q.insert("b", Tensor::scalar(0.0)).unwrap();
        back.restore_params("gen", &mut q).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupt_input_is_an_error() {
        let ck = Checkpoint::new([0; 32], 0);
        let mut b = ck.to_bytes();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let b = &ck.to_bytes()[..20];
        assert!(Checkpoint::from_bytes(b).is_err());
    }
}
