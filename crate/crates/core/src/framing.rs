//! Named-tensor binary files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] | u32 count | count × (u16 name_len | name | u8 ndim | u32 dims[ndim] | f64 values[numel])
//!          | u32 trailer_len | trailer (UTF-8 JSON)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DFT1";
pub const SAMPLE_CACHE_MAGIC: [u8; 4] = *b"DFTD";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, Tensor)>,
    pub trailer: String,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode<'a>(
    magic: [u8; 4],
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    trailer: &str,
) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {} bytes", name.len())))?;
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::Checkpoint(format!("tensor '{name}' has too many dimensions")))?;
        body.extend_from_slice(&name_len.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("tensor '{name}' dimension {d} exceeds u32")))?;
            body.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let trailer_len = u32::try_from(trailer.len()).map_err(|_| Error::Checkpoint("trailer too long".into()))?;
    let mut out = Vec::with_capacity(body.len() + trailer.len() + 12);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&trailer_len.to_le_bytes());
    out.extend_from_slice(trailer.as_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
}

pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<TensorFile> {
    let mut c = Cursor { bytes, pos: 0 };
    let found = c.take(4, "magic")?;
    if found != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(found)
        )));
    }
    let count = c.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = c.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8, &format!("values of '{name}'"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let trailer_len = c.u32("trailer length")? as usize;
    let trailer = std::str::from_utf8(c.take(trailer_len, "trailer")?)
        .map_err(|_| Error::Checkpoint("trailer is not UTF-8".into()))?
        .to_string();
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected bytes after trailer",
            bytes.len() - c.pos
        )));
    }
    Ok(TensorFile { tensors, trailer })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 0.1]).unwrap();
        let b = Tensor::scalar(3.25);
        let bytes = encode(CHECKPOINT_MAGIC, [("a", &a), ("bee", &b)], r#"{"x":1}"#).unwrap();
        assert_eq!(&bytes[..4], b"DFT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        let f = decode(CHECKPOINT_MAGIC, &bytes).unwrap();
        assert_eq!(f.tensors.len(), 2);
        assert_eq!(f.get("a").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(f.get("bee").unwrap(), &b);
        assert_eq!(f.trailer, r#"{"x":1}"#);
        assert_eq!(
            encode(
                CHECKPOINT_MAGIC,
                f.tensors.iter().map(|(n, t)| (n.as_str(), t)),
                &f.trailer
            )
            .unwrap(),
            bytes
        );
    }

    #[test]
    fn layout_matches_byte_counts() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode(SAMPLE_CACHE_MAGIC, [("w", &a)], "").unwrap();
        // magic + count + (2 + 1 + 1 + 4 + 16) + trailer length
        assert_eq!(bytes.len(), 4 + 4 + 24 + 4);
        assert_eq!(bytes[8..10], [1, 0]);
        assert_eq!(bytes[10], b'w');
        assert_eq!(bytes[11], 1);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(CHECKPOINT_MAGIC, [("a", &a)], "{}").unwrap();
        assert!(decode(SAMPLE_CACHE_MAGIC, &bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            let err = decode(CHECKPOINT_MAGIC, &bytes[..cut]).unwrap_err().to_string();
            assert!(err.contains("truncated"), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(CHECKPOINT_MAGIC, &extra).is_err());
    }
}
