use crate::audio::{load_wav, log_mel, MelBatch, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::text::{encode_caption, normalize_caption, CaptionBatch, DatasetManifest, EncodedCaption, Vocabulary};

/// One (clip, caption) training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub item: usize,
    pub caption: EncodedCaption,
}

/// Spectrograms and encoded captions held in memory.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub mels: Vec<MelSpectrogram>,
    pub clip_ids: Vec<String>,
    pub examples: Vec<Example>,
    /// Tokenized references per clip, for metric computation.
    pub references: Vec<Vec<Vec<String>>>,
}

impl TrainingSet {
    /// Pairs every clip with each of its captions.
    pub fn new(
        mels: Vec<MelSpectrogram>,
        clip_ids: Vec<String>,
        references: Vec<Vec<Vec<String>>>,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        if mels.len() != references.len() || mels.len() != clip_ids.len() {
            return Err(Error::Shape("clips, ids and references differ in count".into()));
        }
        let mut examples = Vec::new();
        let mut truncated = 0;
        for (item, refs) in references.iter().enumerate() {
            for tokens in refs {
                let caption = encode_caption(tokens, vocab, max_len)?;
                truncated += caption.truncated;
                examples.push(Example { item, caption });
            }
        }
        if truncated > 0 {
            log::warn!("{truncated} caption tokens truncated to fit length {max_len}");
        }
        Ok(Self {
            mels,
            clip_ids,
            examples,
            references,
        })
    }

    /// Reads and featurizes every clip of a manifest.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        vocab: &Vocabulary,
        mel: &MelConfig,
        max_len: usize,
    ) -> Result<Self> {
        let mut mels = Vec::with_capacity(manifest.len());
        for i in 0..manifest.len() {
            let clip = load_wav(&manifest.audio_path(i))?;
            mels.push(log_mel(&clip, mel)?);
        }
        let ids = manifest.items.iter().map(|it| it.id().to_string()).collect();
        Self::new(mels, ids, manifest.tokenized()?, vocab, max_len)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn clips(&self) -> usize {
        self.mels.len()
    }

    /// Mel and caption batches for the given example indices; caption
    /// columns that are padding in every row are dropped.
    pub fn batch(&self, indices: &[usize]) -> Result<(MelBatch, CaptionBatch)> {
        let mels: Vec<&MelSpectrogram> = indices.iter().map(|&i| &self.mels[self.examples[i].item]).collect();
        let rows: Vec<EncodedCaption> = indices.iter().map(|&i| self.examples[i].caption.clone()).collect();
        Ok((MelBatch::from_items(&mels)?, CaptionBatch::from_rows(&rows)?.trimmed()))
    }
}

/// Tokenizes every reference of a manifest, failing on empty captions.
pub fn tokenize_all(manifest: &DatasetManifest) -> Result<Vec<Vec<String>>> {
    manifest
        .items
        .iter()
        .flat_map(|it| it.captions.iter())
        .map(|c| normalize_caption(c))
        .collect()
}
