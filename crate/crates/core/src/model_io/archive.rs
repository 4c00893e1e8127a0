//! `.opmt` tensor archives.
//!
//! ```text
//! magic   "OPMT"
//! version u32 = 1
//! count   u32
//! count × { name_len u16, name utf-8, dtype u8 (0 f32, 1 f64), ndim u8,
//!           dims ndim × u64, data little-endian scalars }
//! crc32   u32 over every preceding byte
//! ```
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Storage, Tensor};

pub const MAGIC: &[u8; 4] = b"OPMT";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "opmt";

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<(String, Tensor)>,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated archive while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many tensors for one archive".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name of {} bytes is too long", name.len())))?;
            let ndim = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("`{name}` has too many axes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(t.dtype()));
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.storage() {
                Storage::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Storage::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!("{} bytes is too short for an archive", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if &body[..4] != MAGIC {
            return Err(Error::Format("missing OPMT magic".into()));
        }
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i} has a non-UTF-8 name")))?
                .to_string();
            let dtype = match r.u8("dtype")? {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::Format(format!("`{name}` has unknown dtype code {other}"))),
            };
            let ndim = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64("dims")?;
                shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("`{name}`: extent {d} too large")))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: element count overflows")))?;
            let nbytes = count
                .checked_mul(dtype.size_of())
                .ok_or_else(|| Error::Format(format!("`{name}`: byte length overflows")))?;
            let raw = r.take(nbytes, &name)?;
            let storage = match dtype {
                DType::F32 => Storage::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => Storage::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            let tensor = Tensor::new(&shape, storage).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
            entries.push((name, tensor));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                body.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("a", Tensor::from_f32(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, 1e-30]).unwrap());
        a.push("b.diag.0", Tensor::from_f64(&[1], vec![std::f64::consts::PI]).unwrap());
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let back = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back.entries.len(), 2);
        for ((n1, t1), (n2, t2)) in a.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OPMT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // name_len, "a", dtype 0, ndim 2, dims 2 and 3
        assert_eq!(&bytes[12..16], &[1, 0, b'a', 0]);
        assert_eq!(bytes[16], 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
        // header, first entry (5 + dims + data), second entry, crc
        assert_eq!(bytes.len(), 12 + 5 + 16 + 24 + 28 + 4);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[30] ^= 0x40;
        let err = TensorArchive::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(TensorArchive::from_bytes(&bytes).is_err());
        assert!(TensorArchive::from_bytes(b"OPMT").is_err());
    }
}
