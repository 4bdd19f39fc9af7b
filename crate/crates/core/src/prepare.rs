//! On-disk prepared datasets: vocabulary, cached spectrograms and a manifest
//! pointing at the cache.
//!
//! ```text
//! <dir>/vocab.txt
//! <dir>/manifest.csv      file_name,caption_1.. with file_name = cache entry
//! <dir>/cache/<id>.lmel
//! <dir>/skipped.txt       one line per skipped row or caption
//! ```

use std::path::{Path, PathBuf};

use crate::audio::{load_wav, log_mel, read_lmel, write_lmel, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::text::{load_clotho_csv, write_clotho_csv, DatasetManifest, ManifestItem, SkipReport, Vocabulary};
use crate::train::{tokenize_all, TrainingSet};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SKIP_FILE: &str = "skipped.txt";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone)]
pub struct PrepareSummary {
    pub items: usize,
    pub vocab_size: usize,
    pub skipped: SkipReport,
    pub dir: PathBuf,
}

/// Cache file name for a source file name; path separators are flattened.
pub fn cache_name(file_name: &str) -> String {
    let stem = Path::new(file_name).with_extension("");
    let flat = stem.to_string_lossy().replace(['/', '\\'], "__");
    format!("{flat}.lmel")
}

fn skip_text(report: &SkipReport) -> String {
    let mut s = String::new();
    for (row, name) in &report.missing_audio {
        s.push_str(&format!("row {row}: missing audio {name}\n"));
    }
    for (row, col) in &report.empty_captions {
        s.push_str(&format!("row {row}: empty caption_{col}\n"));
    }
    s
}

/// Featurizes every usable row of a caption table into `out`. Re-running with
/// unchanged inputs rewrites byte-identical files.
pub fn prepare_dataset(
    csv: &Path,
    audio_root: &Path,
    out: &Path,
    mel: &MelConfig,
    min_count: usize,
) -> Result<PrepareSummary> {
    let (manifest, skipped) = load_clotho_csv(csv, audio_root)?;
    if manifest.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} has no usable rows ({} skipped)",
            csv.display(),
            skipped.missing_audio.len()
        )));
    }
    let vocab = Vocabulary::build(&tokenize_all(&manifest)?, min_count)?;
    let cache = out.join(CACHE_DIR);
    std::fs::create_dir_all(&cache)?;
    let mut items = Vec::with_capacity(manifest.len());
    for (i, item) in manifest.items.iter().enumerate() {
        let clip = load_wav(&manifest.audio_path(i))?;
        let spec = log_mel(&clip, mel)?;
        let name = cache_name(&item.file_name);
        write_lmel(&cache.join(&name), &spec)?;
        items.push(ManifestItem {
            file_name: name,
            captions: item.captions.clone(),
        });
    }
    write_clotho_csv(&out.join(MANIFEST_FILE), &items)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    std::fs::write(out.join(SKIP_FILE), skip_text(&skipped))?;
    Ok(PrepareSummary {
        items: items.len(),
        vocab_size: vocab.len(),
        skipped,
        dir: out.to_path_buf(),
    })
}

/// A prepared directory opened for training or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
}

impl PreparedDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let csv = dir.join(MANIFEST_FILE);
        if !csv.is_file() {
            return Err(Error::MissingFile(csv));
        }
        let (manifest, skipped) = load_clotho_csv(&csv, &dir.join(CACHE_DIR))?;
        if let Some((_, name)) = skipped.missing_audio.first() {
            return Err(Error::MissingFile(dir.join(CACHE_DIR).join(name)));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            vocab,
        })
    }

    pub fn spectrograms(&self, mel: &MelConfig, sample_rate: u32) -> Result<Vec<MelSpectrogram>> {
        let rate = sample_rate as f64 / mel.hop as f64;
        (0..self.manifest.len())
            .map(|i| {
                let mut m = read_lmel(&self.manifest.audio_path(i), rate)?;
                m.source_id = self.manifest.items[i].id().to_string();
                Ok(m)
            })
            .collect()
    }

    /// Training pairs encoded with `vocab` (which may differ from the stored one).
    pub fn training_set(&self, vocab: &Vocabulary, max_len: usize) -> Result<TrainingSet> {
        let mels = self.spectrograms(&MelConfig::default(), 16_000)?;
        let ids = self.manifest.items.iter().map(|it| it.id().to_string()).collect();
        TrainingSet::new(mels, ids, self.manifest.tokenized()?, vocab, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{generate_micro_dataset, SynthConfig};

    #[test]
    fn cache_names_flatten_directories() {
        assert_eq!(cache_name("clip_001.wav"), "clip_001.lmel");
        assert_eq!(cache_name("dev/a b.wav"), "dev__a b.lmel");
    }

    #[test]
    fn prepared_set_matches_direct_featurization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_micro_dataset(&dir.path().join("raw"), 3, 4, &SynthConfig::default()).unwrap();
        let out = dir.path().join("prep");
        let s = prepare_dataset(&ds.csv_path, &ds.manifest.audio_root, &out, &MelConfig::default(), 1).unwrap();
        assert_eq!(s.items, 4);
        let p = PreparedDataset::open(&out).unwrap();
        let cached = p.training_set(&p.vocab, 22).unwrap();
        let direct = TrainingSet::from_manifest(&ds.manifest, &p.vocab, &MelConfig::default(), 22).unwrap();
        assert_eq!(cached.examples, direct.examples);
        for (a, b) in cached.mels.iter().zip(&direct.mels) {
            assert_eq!(a.data, b.data);
        }
    }
}
