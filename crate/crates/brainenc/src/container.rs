//! Versioned binary container: named sections of raw bytes.
//!
//! Layout: `"BENC"` magic, format version, a four-byte kind tag, then each
//! section as `name_len u32 | name | payload_len u64 | payload`, all
//! little-endian. Writers emit sections in insertion order, so identical
//! runs produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nncore::Tensor;

const MAGIC: &[u8; 4] = b"BENC";
const VERSION: u32 = 1;

pub struct ContainerWriter {
    kind: [u8; 4],
    sections: Vec<(String, Vec<u8>)>,
}

impl ContainerWriter {
    pub fn new(kind: &[u8; 4]) -> ContainerWriter {
        ContainerWriter {
            kind: *kind,
            sections: Vec::new(),
        }
    }

    pub fn add_bytes(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.add_bytes(name, serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn add_f64s(&mut self, name: &str, values: &[f64]) {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.add_bytes(name, buf);
    }

    pub fn add_tensor(&mut self, name: &str, t: &Tensor) {
        let mut buf = Vec::with_capacity(4 + t.shape().len() * 4 + t.len() * 8);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.add_bytes(name, buf);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

pub struct Container {
    pub kind: [u8; 4],
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("truncated container".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("non-utf8 section name".into()))?;
            let payload_len =
                u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let payload = take(&mut pos, payload_len)?.to_vec();
            sections.push((name, payload));
        }
        Ok(Container { kind, sections })
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        Container::from_bytes(&fs::read(path)?)
    }

    pub fn section(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Format(format!("missing section '{name}'")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(self.section(name)?)?)
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let bytes = self.section(name)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("section '{name}' not f64-aligned")));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let bytes = self.section(name)?;
        if bytes.len() < 4 {
            return Err(Error::Format("tensor section too short".into()));
        }
        let rank = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let mut pos = 4;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let numel: usize = shape.iter().product();
        if bytes.len() != pos + numel * 8 {
            return Err(Error::Format("tensor payload length mismatch".into()));
        }
        let data = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(shape, data))
    }
}

/// FNV-1a over raw bytes; used for config fingerprints and checkpoint
/// cross-references.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
