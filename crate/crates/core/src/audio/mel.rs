use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means half the sample rate.
    pub f_max: Option<f64>,
    /// Offset inside the logarithm.
    pub log_eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 512,
            n_mels: 64,
            f_min: 50.0,
            f_max: None,
            log_eps: 1e-10,
        }
    }
}

impl MelConfig {
    /// Value written for silent cells: `ln(log_eps)`.
    pub fn floor_value(&self) -> f32 {
        self.log_eps.ln() as f32
    }
}

/// `T x n_mels` natural-log mel energies, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
    pub frame_rate: f64,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Copy extended with `value` rows to at least `frames` frames.
    pub fn padded_to(&self, frames: usize, value: f32) -> Self {
        let mut out = self.clone();
        if frames > self.frames {
            out.data.resize(frames * self.n_mels, value);
            out.frames = frames;
        }
        out
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.data[t * self.n_mels + m]
    }
}

/// Number of fully interior frames: `1 + (len - n_fft) / hop`, or 0 if too short.
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters with unit area (in Hz) per filter.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Band edges in Hz; filter `i` spans `edges[i]..edges[i + 2]`, peaking at `edges[i + 1]`.
    edges: Vec<f64>,
    /// Dense `[n_mels, n_fft/2 + 1]` weights.
    weights: Vec<f64>,
    bins: usize,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Self {
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let area = 2.0 / (right - left);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                weights[m * bins + k] = rise.min(fall).max(0.0) * area;
            }
        }
        Self { edges, weights, bins }
    }

    pub fn n_mels(&self) -> usize {
        self.edges.len() - 2
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges[band + 1]
    }

    pub fn weights(&self, band: usize) -> &[f64] {
        &self.weights[band * self.bins..(band + 1) * self.bins]
    }
}

/// Magnitude STFT (periodic Hann window, no padding), mel filterbank, then `ln(x + eps)`.
pub fn log_mel(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    let n_fft = config.n_fft;
    let frames = frame_count(clip.samples.len(), n_fft, config.hop);
    if frames == 0 {
        return Err(Error::TooShort(format!(
            "clip {} has {} samples, fewer than one {}-point window",
            clip.source_id,
            clip.samples.len(),
            n_fft
        )));
    }
    let sr = clip.sample_rate as f64;
    let bank = MelFilterbank::new(
        clip.sample_rate,
        n_fft,
        config.n_mels,
        config.f_min,
        config.f_max.unwrap_or(sr / 2.0),
    );
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut magnitude = vec![0.0f64; bank.bins];
    let mut data = Vec::with_capacity(frames * config.n_mels);
    for t in 0..frames {
        let start = t * config.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(clip.samples[start + i] as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (m, b) in magnitude.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        for band in 0..config.n_mels {
            let energy: f64 = bank.weights(band).iter().zip(&magnitude).map(|(w, m)| w * m).sum();
            data.push((energy + config.log_eps).ln() as f32);
        }
    }
    Ok(MelSpectrogram {
        frames,
        n_mels: config.n_mels,
        data,
        frame_rate: sr / config.hop as f64,
        source_id: clip.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f32>, sr: u32) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: sr,
            source_id: "t".into(),
        }
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(44_100 * 30, 1024, 512), 2582);
        assert_eq!(frame_count(1024, 1024, 512), 1);
        assert_eq!(frame_count(1023, 1024, 512), 0);
        assert_eq!(frame_count(1536, 1024, 512), 2);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let c = clip(vec![0.0; 1000], 16000);
        assert!(matches!(log_mel(&c, &MelConfig::default()), Err(Error::TooShort(_))));
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let m = log_mel(&clip(vec![0.0; 4096], 16000), &cfg).unwrap();
        assert_eq!(m.frames, 7);
        assert_eq!(m.n_mels, 64);
        assert!(m.data.iter().all(|&v| v == cfg.floor_value()));
        assert_eq!(m.frame_rate, 16000.0 / 512.0);
    }

    #[test]
    fn filters_are_area_normalized() {
        let bank = MelFilterbank::new(16000, 1024, 64, 50.0, 8000.0);
        assert_eq!(bank.n_mels(), 64);
        let bin_hz = 16000.0 / 1024.0;
        for band in 0..64 {
            // Riemann sum over bins approximates the unit area
            let area: f64 = bank.weights(band).iter().sum::<f64>() * bin_hz;
            assert!((area - 1.0).abs() < 0.35, "band {band}: {area}");
        }
        assert!(bank.center_hz(0) > 50.0 && bank.center_hz(63) < 8000.0);
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        let cfg = MelConfig::default();
        let sr = 16000;
        let bank = MelFilterbank::new(sr, cfg.n_fft, cfg.n_mels, cfg.f_min, sr as f64 / 2.0);
        let mut misses = Vec::new();
        for band in 0..64 {
            let f = bank.center_hz(band);
            let samples = (0..4096)
                .map(|n| (0.5 * (2.0 * PI * f * n as f64 / sr as f64).sin()) as f32)
                .collect();
            let m = log_mel(&clip(samples, sr), &cfg).unwrap();
            for t in 0..m.frames {
                let row = m.frame(t);
                let best = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                if best != band {
                    misses.push((band, t, best));
                }
            }
        }
        assert!(misses.is_empty(), "{misses:?}");
    }
}
