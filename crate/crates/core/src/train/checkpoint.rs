//! `LHDF` tensor container: magic, version `u16`, entry count `u32`, then per
//! entry name (`u16` length + bytes), rank `u8`, extents `u32 x rank`, dtype
//! `u8` and a little-endian payload; a CRC32 of everything before it closes the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LHDF";
pub const CHECKPOINT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    /// Opaque bytes, used for text metadata.
    Bytes(Vec<u8>),
}

/// Ordered named entries of one checkpoint file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub entries: Vec<(String, Entry)>,
}

impl TensorFile {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), Entry::F32(t)));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.entries.push((name.into(), Entry::Bytes(text.as_bytes().to_vec())));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name) {
            Some(Entry::F32(t)) => Some(t),
            _ => None,
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => {
                String::from_utf8(b.clone()).map_err(|_| Error::Format(format!("entry {name} is not UTF-8")))
            }
            _ => Err(Error::Format(format!("checkpoint has no text entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F32(t) => {
                    buf.push(t.rank() as u8);
                    for &e in t.shape() {
                        buf.extend_from_slice(&(e as u32).to_le_bytes());
                    }
                    buf.push(DTYPE_F32);
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    buf.push(1);
                    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    buf.push(DTYPE_U8);
                    buf.extend_from_slice(b);
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Integrity {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(Error::Integrity {
                offset: bytes.len() as u64,
                reason: "file too short".into(),
            });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(Error::Integrity {
                offset: body as u64,
                reason: "checksum mismatch".into(),
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body],
            pos: r.pos,
        };
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Integrity {
                offset: at as u64,
                reason: "entry name is not UTF-8".into(),
            })?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let at = r.pos;
            let dtype = r.u8()?;
            let numel: usize = shape.iter().product();
            let entry = match dtype {
                DTYPE_F32 => {
                    let data = r
                        .take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Entry::F32(Tensor::new(shape, data)?)
                }
                DTYPE_U8 if rank == 1 => Entry::Bytes(r.take(numel)?.to_vec()),
                other => {
                    return Err(Error::Integrity {
                        offset: at as u64,
                        reason: format!("unknown dtype {other}"),
                    })
                }
            };
            entries.push((name, entry));
        }
        if r.pos != body {
            return Err(Error::Integrity {
                offset: r.pos as u64,
                reason: "trailing bytes before checksum".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity {
                offset: self.pos as u64,
                reason: format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::default();
        f.push_tensor("w", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        f.push_tensor("s", Tensor::scalar(f32::MIN_POSITIVE));
        f.push_text("meta", "epoch=3\n");
        f
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LHDF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[20] ^= 0xff;
        assert!(matches!(TensorFile::from_bytes(&flipped), Err(Error::Integrity { .. })));
        assert!(matches!(
            TensorFile::from_bytes(&bytes[..bytes.len() - 7]),
            Err(Error::Integrity { .. })
        ));
        let mut old = bytes.clone();
        old[4] = 0;
        assert!(matches!(
            TensorFile::from_bytes(&old),
            Err(Error::UnsupportedVersion { found: 0, expected: 1 })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            TensorFile::from_bytes(&magic),
            Err(Error::Integrity { offset: 0, .. })
        ));
    }
}
