//! Binary container shared by dataset and checkpoint files.
//!
//! ```text
//! magic[8] | header_len: u32 | header JSON
//! | n_blobs: u32 | { name_len: u32 | name | kind: u8 | count: u64 | payload }*
//! | crc32: u32
//! ```
//!
//! All integers and floats are little-endian. `kind` is 0 for `f64` and 1 for
//! `u32` payloads. The CRC32 covers every byte before it.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Blob {
    pub fn len(&self) -> usize {
        match self {
            Blob::F64(v) => v.len(),
            Blob::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Vec<u8>,
    pub blobs: Vec<(String, Blob)>,
}

impl Container {
    pub fn new(header: Vec<u8>) -> Self {
        Self {
            header,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, blob: Blob) {
        self.blobs.push((name.into(), blob));
    }

    pub fn take(&mut self, name: &str) -> Option<Blob> {
        let pos = self.blobs.iter().position(|(n, _)| n == name)?;
        Some(self.blobs.remove(pos).1)
    }

    pub fn take_f64(&mut self, name: &str) -> Result<Vec<f64>> {
        match self.take(name) {
            Some(Blob::F64(v)) => Ok(v),
            Some(_) => Err(Error::Corrupt(format!("blob {name} has the wrong element type"))),
            None => Err(Error::Corrupt(format!("missing blob {name}"))),
        }
    }

    pub fn take_u32(&mut self, name: &str) -> Result<Vec<u32>> {
        match self.take(name) {
            Some(Blob::U32(v)) => Ok(v),
            Some(_) => Err(Error::Corrupt(format!("blob {name} has the wrong element type"))),
            None => Err(Error::Corrupt(format!("missing blob {name}"))),
        }
    }

    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, blob) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match blob {
                Blob::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Blob::U32(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != magic {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let header_len = r.u32()? as usize;
        let header = r.take(header_len)?.to_vec();
        let n_blobs = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(n_blobs.min(64));
        for _ in 0..n_blobs {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Corrupt("blob name is not UTF-8".into()))?
                .to_string();
            let kind = r.take(1)?[0];
            let count = usize::try_from(r.u64()?)
                .map_err(|_| Error::Corrupt("blob length overflows".into()))?;
            let blob = match kind {
                0 => {
                    let raw = r.take(count.checked_mul(8).ok_or_else(overflow)?)?;
                    Blob::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = r.take(count.checked_mul(4).ok_or_else(overflow)?)?;
                    Blob::U32(
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                k => return Err(Error::Corrupt(format!("unknown blob kind {k}"))),
            };
            blobs.push((name, blob));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self { header, blobs })
    }

    pub fn write(&self, magic: &[u8; 8], path: &Path) -> Result<()> {
        std::fs::write(path, self.encode(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn read(magic: &[u8; 8], path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(magic, &bytes)
    }
}

fn overflow() -> Error {
    Error::Corrupt("blob length overflows".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFMT1";

    fn sample() -> Container {
        let mut c = Container::new(br#"{"k":1}"#.to_vec());
        c.push("x", Blob::F64(vec![1.5, -0.0, f64::MIN_POSITIVE]));
        c.push("u", Blob::U32(vec![0, 7, u32::MAX]));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode(MAGIC);
        let back = Container::decode(MAGIC, &bytes).unwrap();
        assert_eq!(back.encode(MAGIC), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample().encode(MAGIC);
        for cut in [3, 12, bytes.len() - 9, bytes.len() - 1] {
            let err = Container::decode(MAGIC, &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = sample().encode(MAGIC);
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(
            Container::decode(MAGIC, &bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn wrong_magic() {
        let bytes = sample().encode(MAGIC);
        assert!(matches!(Container::decode(b"OTHERFMT", &bytes), Err(Error::Corrupt(_))));
    }
}
