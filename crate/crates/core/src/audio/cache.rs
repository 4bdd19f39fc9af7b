//! On-disk spectrogram cache: `"LMEL"`, version `u16`, frames `u32`,
//! bins `u32`, then row-major little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};

pub const LMEL_MAGIC: &[u8; 4] = b"LMEL";
pub const LMEL_VERSION: u16 = 1;
const HEADER_LEN: u64 = 14;

pub fn write_lmel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + mel.data.len() * 4);
    buf.extend_from_slice(LMEL_MAGIC);
    buf.extend_from_slice(&LMEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mel.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for v in &mel.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a cached spectrogram. Frame rate is not stored and must be supplied.
pub fn read_lmel(path: &Path, frame_rate: f64) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Integrity {
            offset: bytes.len() as u64,
            reason: "truncated LMEL header".into(),
        });
    }
    if &bytes[..4] != LMEL_MAGIC {
        return Err(Error::Integrity {
            offset: 0,
            reason: "bad LMEL magic".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LMEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: LMEL_VERSION,
        });
    }
    let frames = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let n_mels = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN as usize..];
    if payload.len() != frames * n_mels * 4 {
        return Err(Error::Integrity {
            offset: bytes.len() as u64,
            reason: format!(
                "expected {} payload bytes, found {}",
                frames * n_mels * 4,
                payload.len()
            ),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(MelSpectrogram {
        frames,
        n_mels,
        data,
        frame_rate,
        source_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_and_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.lmel");
        let mel = MelSpectrogram {
            frames: 3,
            n_mels: 2,
            data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -23.0],
            frame_rate: 31.25,
            source_id: "clip".into(),
        };
        write_lmel(&p, &mel).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"LMEL");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 24);
        assert_eq!(read_lmel(&p, 31.25).unwrap(), mel);

        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_lmel(&p, 31.25), Err(Error::Integrity { .. })));
    }
}
