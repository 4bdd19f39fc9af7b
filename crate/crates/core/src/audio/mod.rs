//! WAV ingestion, log-mel features and spectrogram augmentation.

mod augment;
mod cache;
mod mel;
mod wav;

pub use augment::{augment_batch, spec_augment, AugmentPolicy, MaskAxis, MaskFill, MaskSpan};
pub use cache::{read_lmel, write_lmel, LMEL_MAGIC, LMEL_VERSION};
pub use mel::{frame_count, log_mel, MelConfig, MelFilterbank, MelSpectrogram};
pub use wav::{load_wav, write_wav, AudioClip};

/// Log-mel spectrograms zero-padded in time to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBatch {
    /// `[batch, frames, n_mels]`, row-major.
    pub data: Vec<f32>,
    pub batch: usize,
    pub frames: usize,
    pub n_mels: usize,
    /// Unpadded frame count of each item.
    pub lengths: Vec<usize>,
}

impl MelBatch {
    pub fn from_items(items: &[&MelSpectrogram]) -> crate::Result<Self> {
        let Some(first) = items.first() else {
            return Err(crate::Error::Shape("empty mel batch".into()));
        };
        let n_mels = first.n_mels;
        if items.iter().any(|m| m.n_mels != n_mels) {
            return Err(crate::Error::Shape("mel bin counts differ within a batch".into()));
        }
        let frames = items.iter().map(|m| m.frames).max().unwrap_or(0);
        let mut data = vec![0.0f32; items.len() * frames * n_mels];
        for (i, m) in items.iter().enumerate() {
            data[i * frames * n_mels..][..m.frames * n_mels].copy_from_slice(&m.data);
        }
        Ok(Self {
            data,
            batch: items.len(),
            frames,
            n_mels,
            lengths: items.iter().map(|m| m.frames).collect(),
        })
    }

    pub fn item(&self, i: usize) -> &[f32] {
        &self.data[i * self.frames * self.n_mels..][..self.frames * self.n_mels]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frames * self.n_mels;
        &mut self.data[i * n..][..n]
    }
}
