//! `AKD1` binary container for named tensors.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "AKD1"
//! header_len, header bytes      UTF-8 `key=value` lines
//! repeated until end of file:
//!   name_len, name bytes
//!   rank, dims[rank]
//!   f32 values (little-endian), product(dims) of them
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AKD1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        StoredTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let data = self.data.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
        if self.shape.is_empty() {
            return Ok(Tensor::scalar(S::from_f64_lossy(self.data[0] as f64)));
        }
        Tensor::from_vec(data, &self.shape)
    }
}

/// Ordered header entries plus ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for header key `{key}`")))
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.tensors.push(StoredTensor::from_tensor(name, t));
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn load<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?
            .to_tensor()
    }

    /// Load `name` and check it has the expected shape.
    pub fn load_shaped<S: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
        let t = self.load::<S>(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("header line without `=`: {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let mut tensors = Vec::new();
        while !r.is_empty() {
            let name_len = read_u64(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_u64(&mut r)? as usize;
            if rank > 16 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = take(&mut r, count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Write atomically: a temporary sibling is renamed into place, and removed on failure.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over the serialized tensors (header excluded), hex encoded.
    pub fn tensor_checksum(&self) -> String {
        let mut body = Checkpoint { header: vec![], tensors: self.tensors.clone() }.to_bytes();
        body.drain(..12);
        let digest = Sha256::digest(&body);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of data".into()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_is_exact() {
        let mut ck = Checkpoint::default();
        ck.set("d_model", 8);
        ck.tensors.push(StoredTensor { name: "w".into(), shape: vec![2], data: vec![1.0, -2.5] });
        let bytes = ck.to_bytes();
        let mut want = b"AKD1".to_vec();
        want.extend(10u64.to_le_bytes());
        want.extend(b"d_model=8\n");
        want.extend(1u64.to_le_bytes());
        want.extend(b"w");
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"AKD2\0\0\0\0\0\0\0\0").is_err());
        let mut ck = Checkpoint::default();
        ck.tensors.push(StoredTensor { name: "w".into(), shape: vec![3], data: vec![1.0; 3] });
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(
            keys in prop::collection::vec("[a-z_]{1,8}", 0..4),
            values in prop::collection::vec(-1e6f32..1e6, 1..20),
        ) {
            let mut ck = Checkpoint::default();
            for (i, k) in keys.iter().enumerate() {
                ck.header.push((k.clone(), format!("v{i}")));
            }
            ck.tensors.push(StoredTensor { name: "a.b".into(), shape: vec![values.len()], data: values.clone() });
            ck.tensors.push(StoredTensor { name: "s".into(), shape: vec![1, 1], data: vec![values[0]] });
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
