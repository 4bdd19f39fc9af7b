use std::fmt;
use std::path::{Path, PathBuf};

use super::normalize_caption;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    /// File name relative to the manifest's audio root.
    pub file_name: String,
    /// Raw reference captions, in column order.
    pub captions: Vec<String>,
}

impl ManifestItem {
    /// Clip identifier: the file name without extension.
    pub fn id(&self) -> &str {
        Path::new(&self.file_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&self.file_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub audio_root: PathBuf,
    pub split: Split,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn audio_path(&self, i: usize) -> PathBuf {
        self.audio_root.join(&self.items[i].file_name)
    }

    /// Every `(item index, caption)` training pair.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, &str)> {
        self.items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| it.captions.iter().map(move |c| (i, c.as_str())))
    }

    /// Tokenized references of every item.
    pub fn tokenized(&self) -> Result<Vec<Vec<Vec<String>>>> {
        self.items
            .iter()
            .map(|it| it.captions.iter().map(|c| normalize_caption(c)).collect())
            .collect()
    }

    /// Keeps only the items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            audio_root: self.audio_root.clone(),
            split,
        }
    }
}

/// Rows or cells dropped while loading a caption table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SkipReport {
    /// `(csv row, file name)` of rows whose audio file does not exist.
    pub missing_audio: Vec<(usize, String)>,
    /// `(csv row, caption column)` of captions empty after normalization.
    pub empty_captions: Vec<(usize, usize)>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.missing_audio.is_empty() && self.empty_captions.is_empty()
    }
}

fn check_header(header: &csv::StringRecord) -> Result<usize> {
    let n = header.len().saturating_sub(1);
    let ok = (1..=5).contains(&n)
        && header.get(0) == Some("file_name")
        && (1..=n).all(|i| header.get(i) == Some(format!("caption_{i}").as_str()));
    if ok {
        Ok(n)
    } else {
        Err(Error::Format(format!(
            "expected header file_name,caption_1..caption_5, got {:?}",
            header.iter().collect::<Vec<_>>()
        )))
    }
}

/// Loads a `file_name,caption_1,...` table. Rows whose audio is missing are
/// skipped and reported; empty captions are dropped with a warning.
pub fn load_clotho_csv(csv_path: &Path, audio_root: &Path) -> Result<(DatasetManifest, SkipReport)> {
    if !csv_path.exists() {
        return Err(Error::MissingFile(csv_path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(csv_path)?;
    let columns = check_header(reader.headers()?)?;
    let mut items = Vec::new();
    let mut report = SkipReport::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let file_name = record.get(0).unwrap_or_default().to_string();
        if !audio_root.join(&file_name).is_file() {
            log::warn!("row {row}: audio file {file_name} not found, skipping");
            report.missing_audio.push((row, file_name));
            continue;
        }
        let mut captions = Vec::with_capacity(columns);
        for col in 1..=columns {
            let text = record.get(col).unwrap_or_default();
            if normalize_caption(text).is_ok() {
                captions.push(text.to_string());
            } else {
                log::warn!("row {row}: caption_{col} is empty");
                report.empty_captions.push((row, col));
            }
        }
        if captions.is_empty() {
            continue;
        }
        items.push(ManifestItem { file_name, captions });
    }
    Ok((
        DatasetManifest {
            items,
            audio_root: audio_root.to_path_buf(),
            split: Split::Train,
        },
        report,
    ))
}

/// Writes items as a caption table with as many caption columns as the
/// longest item needs (at most five); shorter items leave cells empty.
pub fn write_clotho_csv(path: &Path, items: &[ManifestItem]) -> Result<()> {
    let columns = items.iter().map(|it| it.captions.len()).max().unwrap_or(1).clamp(1, 5);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["file_name".to_string()];
    header.extend((1..=columns).map(|i| format!("caption_{i}")));
    w.write_record(&header)?;
    for it in items {
        let mut rec = vec![it.file_name.as_str()];
        rec.extend((0..columns).map(|i| it.captions.get(i).map(String::as_str).unwrap_or("")));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(rows: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.wav", "b.wav", "c.wav"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let csv = dir.path().join("captions.csv");
        std::fs::write(
            &csv,
            format!("file_name,caption_1,caption_2,caption_3,caption_4,caption_5\n{rows}"),
        )
        .unwrap();
        (dir, csv)
    }

    #[test]
    fn three_rows_give_fifteen_pairs() {
        let (dir, csv) = fixture("a.wav,one,two,three,four,five\nb.wav,1,2,3,4,5\nc.wav,x,y,z,w,v\n");
        let (m, report) = load_clotho_csv(&csv, dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.pairs().count(), 15);
        assert!(report.is_empty());
        assert_eq!(m.items[1].id(), "b");
    }

    #[test]
    fn empty_caption_and_missing_audio_are_reported() {
        let (dir, csv) = fixture("a.wav,one,two,three,,five\nmissing.wav,1,2,3,4,5\n");
        let (m, report) = load_clotho_csv(&csv, dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.items[0].captions.len(), 4);
        assert_eq!(report.empty_captions, vec![(0, 4)]);
        assert_eq!(report.missing_audio, vec![(1, "missing.wav".to_string())]);
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        std::fs::write(&csv, "name,text\na.wav,hello\n").unwrap();
        assert!(matches!(load_clotho_csv(&csv, dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn written_table_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.wav"), b"x").unwrap();
        let items = vec![ManifestItem {
            file_name: "a.wav".into(),
            captions: vec!["a low tone, then noise".into()],
        }];
        let csv = dir.path().join("t.csv");
        write_clotho_csv(&csv, &items).unwrap();
        let (m, report) = load_clotho_csv(&csv, dir.path()).unwrap();
        assert_eq!(m.items, items);
        assert!(report.is_empty());
        assert!(std::fs::read_to_string(&csv)
            .unwrap()
            .starts_with("file_name,caption_1\n"));
    }
}
