//! Caption normalization, vocabulary and dataset ingestion.

mod dataset;
mod synth;
mod vocab;

use crate::error::{Error, Result};

pub use dataset::{load_clotho_csv, write_clotho_csv, DatasetManifest, ManifestItem, SkipReport, Split};
pub use synth::{generate_micro_dataset, MicroDataset, SynthConfig, EVENT_KINDS};
pub use vocab::{Vocabulary, EOS, PAD, RESERVED, SOS, UNK};

/// Default padded caption length: 20 words plus `<sos>` and `<eos>`.
pub const DEFAULT_MAX_LEN: usize = 22;

/// Lowercases, drops every character outside `[a-z0-9']` and whitespace, and
/// splits on whitespace.
pub fn normalize_caption(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '\'' || c.is_whitespace())
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyCaption(text.to_string()));
    }
    Ok(tokens)
}

/// One encoded caption row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCaption {
    pub ids: Vec<usize>,
    /// Unpadded length including `<sos>` and `<eos>`.
    pub len: usize,
    /// Tokens dropped to fit `max_len`.
    pub truncated: usize,
}

/// Encodes `[<sos>, ids.., <eos>, <pad>..]` of exactly `max_len` entries.
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<EncodedCaption> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max caption length {max_len} leaves no room for words"
        )));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyCaption(String::new()));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(SOS);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t)));
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    Ok(EncodedCaption {
        ids,
        len,
        truncated: tokens.len() - keep,
    })
}

/// Maps ids back to words, stopping at `<eos>` and skipping other specials.
pub fn decode_caption(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id != PAD && id != SOS)
        .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
        .collect()
}

/// Padded `[batch, max_len]` id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub max_len: usize,
}

impl CaptionBatch {
    pub fn from_rows(rows: &[EncodedCaption]) -> Result<Self> {
        let max_len = rows.first().map(|r| r.ids.len()).unwrap_or(0);
        if rows.iter().any(|r| r.ids.len() != max_len) {
            return Err(Error::Shape("caption rows differ in length".into()));
        }
        Ok(Self {
            ids: rows.iter().flat_map(|r| r.ids.iter().copied()).collect(),
            lengths: rows.iter().map(|r| r.len).collect(),
            batch: rows.len(),
            max_len,
        })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> Self {
        let len = self.lengths.iter().copied().max().unwrap_or(0).max(2);
        Self {
            ids: (0..self.batch).flat_map(|i| self.row(i)[..len].to_vec()).collect(),
            lengths: self.lengths.clone(),
            batch: self.batch,
            max_len: len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_caption("A Dog Barks!").unwrap(), words("a dog barks"));
        assert_eq!(
            normalize_caption("rain, rain,   RAIN.").unwrap(),
            words("rain rain rain")
        );
        assert_eq!(normalize_caption("it's 3 o'clock").unwrap(), words("it's 3 o'clock"));
        assert!(matches!(normalize_caption(" ?! "), Err(Error::EmptyCaption(_))));
    }

    #[test]
    fn encoding_examples() {
        let v = Vocabulary::build([words("a dog"), words("a cat")].iter(), 1).unwrap();
        let row = encode_caption(&words("a dog"), &v, 6).unwrap();
        assert_eq!(row.ids, vec![1, v.id("a"), v.id("dog"), 2, 0, 0]);
        assert_eq!(row.len, 4);
        let unk = encode_caption(&words("zebra"), &v, 5).unwrap();
        assert_eq!(unk.ids, vec![1, 3, 2, 0, 0]);
        let cut = encode_caption(&words("a dog a cat a"), &v, 5).unwrap();
        assert_eq!(cut.truncated, 2);
        assert_eq!(cut.ids.len(), 5);
        assert_eq!(decode_caption(&row.ids, &v), words("a dog"));
    }

    #[test]
    fn batch_trims_common_padding() {
        let v = Vocabulary::build([words("a dog")].iter(), 1).unwrap();
        let rows = [
            encode_caption(&words("a"), &v, 8).unwrap(),
            encode_caption(&words("a dog"), &v, 8).unwrap(),
        ];
        let b = CaptionBatch::from_rows(&rows).unwrap().trimmed();
        assert_eq!(b.max_len, 4);
        assert_eq!(b.row(0), &[1, v.id("a"), 2, 0]);
    }
}
