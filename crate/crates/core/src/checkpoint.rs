//! Binary container for named `f32` arrays.
//!
//! Layout: `b"ACRO"`, format version (`u32` LE), header length (`u32` LE),
//! a UTF-8 header, the concatenated little-endian `f32` payload, and a CRC32
//! of the payload (`u32` LE). Header lines are either
//! `meta <key> <value...>` or `tensor <name> <d0,d1,..> <offset> <count>`,
//! offsets and counts in elements.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ACRO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("checkpoint header lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| Error::format(format!("checkpoint header `{key}` = {v:?} is malformed")))
    }

    /// Adds every tensor of `params` under `prefix`.
    pub fn insert_all<S: Scalar>(&mut self, prefix: &str, params: &BTreeMap<String, Tensor<S>>) {
        for (name, t) in params {
            self.tensors.insert(format!("{prefix}{name}"), t.cast());
        }
    }

    /// Removes and returns all tensors whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed<S: Scalar>(&mut self, prefix: &str) -> BTreeMap<String, Tensor<S>> {
        let names: Vec<String> = self.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        names
            .into_iter()
            .map(|n| {
                let t = self.tensors.remove(&n).expect("listed above");
                (n[prefix.len()..].to_string(), t.cast())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
            offset += t.numel();
        }
        let mut payload = Vec::with_capacity(offset * 4);
        for t in self.tensors.values() {
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(12 + header.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::format("truncated checkpoint");
        if bytes.len() < 12 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let hlen = u32_at(8) as usize;
        let body = 12 + hlen;
        if bytes.len() < body + 4 {
            return Err(truncated());
        }
        let header = std::str::from_utf8(&bytes[12..body]).map_err(|_| Error::format("header is not UTF-8"))?;
        let payload = &bytes[body..bytes.len() - 4];
        if payload.len() % 4 != 0 {
            return Err(truncated());
        }
        let crc = u32_at(bytes.len() - 4);
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum);
        }
        let floats: Vec<f32> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut ck = Checkpoint::new();
        for line in header.lines() {
            let mut parts = line.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(Error::format(format!("bad tensor line {line:?}")));
                    }
                    let bad = || Error::format(format!("bad tensor line {line:?}"));
                    let shape: Vec<usize> =
                        f[1].split(',').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                    let off: usize = f[2].parse().map_err(|_| bad())?;
                    let n: usize = f[3].parse().map_err(|_| bad())?;
                    if off + n > floats.len() {
                        return Err(truncated());
                    }
                    let t = Tensor::new(shape, floats[off..off + n].to_vec())?;
                    t.ensure_finite(f[0])?;
                    ck.tensors.insert(f[0].to_string(), t);
                }
                _ => return Err(Error::format(format!("unrecognized header line {line:?}"))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
