//! Synthetic clips of tones, sweeps and noise with template captions.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{write_clotho_csv, DatasetManifest, ManifestItem, Split};
use crate::audio::{write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    LowTone,
    HighTone,
    RisingSweep,
    FallingSweep,
    Noise,
    Beeps,
    Hum,
}

pub const EVENT_KINDS: [EventKind; 7] = [
    EventKind::LowTone,
    EventKind::HighTone,
    EventKind::RisingSweep,
    EventKind::FallingSweep,
    EventKind::Noise,
    EventKind::Beeps,
    EventKind::Hum,
];

impl EventKind {
    pub fn phrase(self) -> &'static str {
        match self {
            EventKind::LowTone => "a low tone",
            EventKind::HighTone => "a high tone",
            EventKind::RisingSweep => "a rising sweep",
            EventKind::FallingSweep => "a falling sweep",
            EventKind::Noise => "a burst of noise",
            EventKind::Beeps => "short beeps",
            EventKind::Hum => "a low hum",
        }
    }

    fn render(self, out: &mut [f64], sr: f64, rng: &mut ChaCha8Rng) {
        let n = out.len();
        let amp = rng.random_range(0.3..0.6);
        let dur = n as f64 / sr;
        match self {
            EventKind::LowTone | EventKind::HighTone => {
                let f = if self == EventKind::LowTone {
                    rng.random_range(250.0..450.0)
                } else {
                    rng.random_range(2500.0..3500.0)
                };
                for (i, s) in out.iter_mut().enumerate() {
                    *s += amp * (2.0 * PI * f * i as f64 / sr).sin();
                }
            }
            EventKind::RisingSweep | EventKind::FallingSweep => {
                let (lo, hi) = (rng.random_range(300.0..500.0), rng.random_range(3000.0..4000.0));
                let (f0, f1) = if self == EventKind::RisingSweep {
                    (lo, hi)
                } else {
                    (hi, lo)
                };
                for (i, s) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) / dur * t * t);
                    *s += amp * phase.sin();
                }
            }
            EventKind::Noise => {
                for s in out.iter_mut() {
                    *s += amp * rng.random_range(-1.0..1.0);
                }
            }
            EventKind::Beeps => {
                let f = rng.random_range(1200.0..1600.0);
                let rate = rng.random_range(6.0..9.0);
                for (i, s) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    if (t * rate).fract() < 0.5 {
                        *s += amp * (2.0 * PI * f * t).sin();
                    }
                }
            }
            EventKind::Hum => {
                let f = rng.random_range(90.0..130.0);
                for (i, s) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let w = 2.0 * PI * f * t;
                    *s += amp * (0.6 * w.sin() + 0.3 * (2.0 * w).sin() + 0.1 * (3.0 * w).sin());
                }
            }
        }
    }
}

/// Caption for an event sequence, e.g. "a high tone then short beeps".
pub fn caption_for(events: &[EventKind]) -> String {
    events.iter().map(|e| e.phrase()).collect::<Vec<_>>().join(" then ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Mel frames per clip at a 1024-point window and 512 hop.
    pub frames: usize,
    pub min_events: usize,
    pub max_events: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frames: 32,
            min_events: 2,
            max_events: 3,
        }
    }
}

impl SynthConfig {
    pub fn samples(&self) -> usize {
        (self.frames.max(1) - 1) * 512 + 1024
    }
}

#[derive(Debug, Clone)]
pub struct MicroDataset {
    pub manifest: DatasetManifest,
    pub csv_path: PathBuf,
    pub events: Vec<Vec<EventKind>>,
}

fn draw_events(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<EventKind> {
    let k = rng.random_range(cfg.min_events..=cfg.max_events);
    let mut seq: Vec<EventKind> = Vec::with_capacity(k);
    while seq.len() < k {
        let e = EVENT_KINDS[rng.random_range(0..EVENT_KINDS.len())];
        if seq.last() != Some(&e) {
            seq.push(e);
        }
    }
    seq
}

fn synthesize(events: &[EventKind], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.samples();
    let sr = cfg.sample_rate as f64;
    let mut signal: Vec<f64> = (0..n).map(|_| 0.005 * rng.random_range(-1.0..1.0)).collect();
    let seg = n / events.len();
    let fade = (0.005 * sr) as usize;
    for (i, e) in events.iter().enumerate() {
        let jitter = rng.random_range(0..=seg / 10);
        let start = i * seg + jitter;
        let end = ((i + 1) * seg).min(n);
        let mut part = vec![0.0; end - start];
        e.render(&mut part, sr, rng);
        let len = part.len();
        for (j, v) in part.iter().enumerate() {
            let ramp = (j.min(len - 1 - j) as f64 / fade as f64).min(1.0);
            signal[start + j] += v * ramp;
        }
    }
    signal.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()
}

/// Writes `n` clips `clip_XXX.wav` plus `captions.csv` into `dir`. Every
/// clip gets a distinct event sequence; the same seed gives identical bytes.
pub fn generate_micro_dataset(dir: &Path, seed: u64, n: usize, cfg: &SynthConfig) -> Result<MicroDataset> {
    if n == 0 {
        return Err(Error::Config("micro dataset needs at least one item".into()));
    }
    if cfg.min_events == 0 || cfg.min_events > cfg.max_events {
        return Err(Error::Config("event count range is empty".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = stream_rng(seed, Stream::Synth, 0);
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(n);
    let mut all_events = Vec::with_capacity(n);
    let mut attempts = 0;
    while items.len() < n {
        attempts += 1;
        if attempts > 100 * n + 1000 {
            return Err(Error::Config(format!("cannot draw {n} distinct event sequences")));
        }
        let events = draw_events(&mut rng, cfg);
        if !seen.insert(events.clone()) {
            continue;
        }
        let file_name = format!("clip_{:03}.wav", items.len());
        let samples = synthesize(&events, cfg, &mut rng);
        let clip = AudioClip {
            samples,
            sample_rate: cfg.sample_rate,
            source_id: file_name.clone(),
        };
        write_wav(&dir.join(&file_name), &clip)?;
        items.push(ManifestItem {
            file_name,
            captions: vec![caption_for(&events)],
        });
        all_events.push(events);
    }
    let csv_path = dir.join("captions.csv");
    write_clotho_csv(&csv_path, &items)?;
    Ok(MicroDataset {
        manifest: DatasetManifest {
            items,
            audio_root: dir.to_path_buf(),
            split: Split::Train,
        },
        csv_path,
        events: all_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::load_clotho_csv;

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::default();
        let da = generate_micro_dataset(a.path(), 7, 8, &cfg).unwrap();
        generate_micro_dataset(b.path(), 7, 8, &cfg).unwrap();
        assert_eq!(da.manifest.len(), 8);
        for it in &da.manifest.items {
            let x = std::fs::read(a.path().join(&it.file_name)).unwrap();
            let y = std::fs::read(b.path().join(&it.file_name)).unwrap();
            assert_eq!(x, y);
        }
        let csv_a = std::fs::read(a.path().join("captions.csv")).unwrap();
        assert_eq!(csv_a, std::fs::read(b.path().join("captions.csv")).unwrap());
        let (m, _) = load_clotho_csv(&da.csv_path, a.path()).unwrap();
        assert_eq!(m.items, da.manifest.items);
    }

    #[test]
    fn different_seeds_share_vocabulary() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::default();
        let da = generate_micro_dataset(a.path(), 7, 8, &cfg).unwrap();
        let db = generate_micro_dataset(b.path(), 8, 8, &cfg).unwrap();
        let caps = |d: &MicroDataset| {
            d.manifest
                .items
                .iter()
                .map(|i| i.captions[0].clone())
                .collect::<Vec<_>>()
        };
        assert_ne!(caps(&da), caps(&db));
        let words = |d: &MicroDataset| -> HashSet<String> {
            caps(d)
                .iter()
                .flat_map(|c| c.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect()
        };
        assert!(words(&da).intersection(&words(&db)).count() >= 3);
        let distinct: HashSet<_> = caps(&da).into_iter().collect();
        assert_eq!(distinct.len(), 8);
    }
}
