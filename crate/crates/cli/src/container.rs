//! Named-tensor container shared by checkpoints and scene archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "SOP2CKPT"
//! version          u32      1
//! header length    u32      then that many bytes of UTF-8 text
//! tensor count     u32
//! per tensor       u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!                  u64 byte offset into the payload
//! payload length   u64      then the payload: f32 LE, row-major
//! ```

use std::path::Path;

use sop2::numkernel::Tensor;
use sop2::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SOP2CKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} overflows")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn len32(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} too long for the container")))
}

impl Container {
    pub fn new(header: impl Into<String>) -> Self {
        Container {
            header: header.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serialises; non-finite values abort with the tensor's name.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len32(self.header.len(), "header")?);
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&len32(self.tensors.len(), "tensor count")?);
        let mut names = std::collections::HashSet::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if !names.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(name.clone()));
            }
            out.extend_from_slice(&len32(name.len(), "tensor name")?);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len32(t.shape().len(), "tensor rank")?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a SOP2CKPT container".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let n = r.u32("header length")? as usize;
        let header = r.text(n, "header")?;
        let count = r.u32("tensor count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let name = r.text(n, "tensor name")?;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.usize("dimension")).collect::<Result<Vec<_>>>()?;
            let offset = r.usize("offset")?;
            manifest.push((name, shape, offset));
        }
        let payload_len = r.usize("payload length")?;
        let payload = r.take(payload_len, "payload")?;
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(manifest.len());
        let mut names = std::collections::HashSet::new();
        for (name, shape, offset) in &manifest {
            if !names.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            let len = shape
                .iter()
                .try_fold(4usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` shape {shape:?} overflows")))?;
            if offset % 4 != 0 || offset.checked_add(len).is_none_or(|end| end > payload.len()) {
                return Err(Error::Format(format!("`{name}` lies outside the payload")));
            }
            spans.push((*offset, offset + len, name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!("`{}` overlaps `{}`", w[0].2, w[1].2)));
            }
        }

        let tensors = manifest
            .into_iter()
            .map(|(name, shape, offset)| {
                let numel: usize = shape.iter().product();
                let data = payload[offset..offset + 4 * numel]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                let t = Tensor::new(&shape, data)?;
                if !t.is_finite() {
                    return Err(Error::Numerical(name));
                }
                Ok((name, t))
            })
            .collect::<Result<_>>()?;
        Ok(Container { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `key = value` lines of a header, in order.
pub fn header_fields(header: &str) -> Vec<(&str, &str)> {
    header
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}
