use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::Io(e),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a 16-bit PCM WAV file. Multi-channel audio is averaged to mono.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: only 16-bit PCM is supported (found {:?}, {} bits)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let declared = reader.len() as usize;
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    if raw.len() < declared || raw.len() % channels != 0 {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("{}: truncated sample data", path.display()),
        )));
    }
    let samples = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64).sum();
            (sum / channels as f64 / 32768.0) as f32
        })
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        samples,
        sample_rate: spec.sample_rate,
        source_id,
    })
}

/// Writes mono 16-bit PCM; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &clip.samples {
        let q = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        writer.write_sample(q).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, samples: &[i32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            if bits == 16 {
                w.write_sample(s as i16).unwrap();
            } else {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_raw(&p, 1, 16000, 16, &vec![0; 16000]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.source_id, "silence");
        assert_eq!(clip.duration_secs(), 1.0);
    }

    #[test]
    fn full_scale_square_wave_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("square.wav");
        let s: Vec<i32> = (0..100).map(|i| if i % 2 == 0 { 32767 } else { -32768 }).collect();
        write_raw(&p, 1, 8000, 16, &s);
        let clip = load_wav(&p).unwrap();
        let max = clip.samples.iter().cloned().fold(f32::MIN, f32::max);
        let min = clip.samples.iter().cloned().fold(f32::MAX, f32::min);
        assert_eq!(min, -1.0);
        assert_eq!(max, 32767.0 / 32768.0);
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let s: Vec<i32> = (0..200)
            .flat_map(|i| {
                let x = (i * 97 % 20000) - 10000;
                [x, -x]
            })
            .collect();
        write_raw(&p, 2, 16000, 16, &s);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 200);
        assert!(clip.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_pcm16_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wide.wav");
        write_raw(&p, 1, 16000, 24, &[0, 1, 2]);
        assert!(matches!(load_wav(&p), Err(Error::Format(_))));
        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"not a wave file at all").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::Format(_) | Error::Io(_))));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cut.wav");
        write_raw(&p, 1, 16000, 16, &vec![100; 1000]);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 501]).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Io(_))));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tone.wav");
        let clip = AudioClip {
            samples: (0..400).map(|i| (i as f32 * 0.05).sin() * 0.5).collect(),
            sample_rate: 16000,
            source_id: "tone".into(),
        };
        write_wav(&p, &clip).unwrap();
        let back = load_wav(&p).unwrap();
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
