//! Caption generation, metric reports and the decoder ablation table.

mod decode;
pub mod metrics;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::{MelBatch, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, DecodeMode};
use crate::text::{decode_caption, DatasetManifest, Vocabulary, DEFAULT_MAX_LEN};
use crate::train::{evaluate_normalized_loss, Loaded, TrainingSet};

pub use decode::{beam_decode, greedy_decode, Hypothesis, ModelScorer, StepScorer};

pub const METRIC_COLUMNS: [&str; 6] = ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGEL", "CIDEr"];

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    /// 1 means greedy decoding.
    pub beam: usize,
    /// Token budget per caption, `<eos>` included.
    pub max_steps: usize,
    /// Length-normalization exponent for beam search; 0 disables it.
    pub alpha: f64,
    /// Clips encoded together.
    pub batch: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 1,
            max_steps: DEFAULT_MAX_LEN - 1,
            alpha: 0.0,
            batch: 16,
        }
    }
}

/// Decodes every spectrogram with the model's current mode.
pub fn caption_clips(
    model: &mut CaptionModel<f32>,
    mels: &[MelSpectrogram],
    opts: &DecodeOptions,
) -> Result<Vec<Hypothesis>> {
    let mut out = Vec::with_capacity(mels.len());
    for chunk in mels.chunks(opts.batch.max(1)) {
        let refs: Vec<&MelSpectrogram> = chunk.iter().collect();
        let memory = model.memory(&MelBatch::from_items(&refs)?)?;
        let mut scorer = ModelScorer { model, memory };
        let items: Vec<usize> = (0..chunk.len()).collect();
        if opts.beam <= 1 {
            out.extend(greedy_decode(&mut scorer, &items, opts.max_steps)?);
        } else {
            for &i in &items {
                out.push(beam_decode(&mut scorer, i, opts.beam, opts.max_steps, opts.alpha)?);
            }
        }
    }
    Ok(out)
}

/// Normalized caption text of a hypothesis.
pub fn hypothesis_text(h: &Hypothesis, vocab: &Vocabulary) -> String {
    decode_caption(&h.tokens, vocab).join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemScores {
    pub clip_id: String,
    pub hypothesis: String,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub items: Vec<ItemScores>,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.cider,
        ]
    }

    pub fn csv_header() -> String {
        format!("model,{}", METRIC_COLUMNS.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let cells: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("{label},{}", cells.join(","))
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            let rec = serde_json::json!({
                "clip_id": it.clip_id,
                "hypothesis": it.hypothesis,
                "BLEU1": it.bleu[0],
                "BLEU2": it.bleu[1],
                "BLEU3": it.bleu[2],
                "BLEU4": it.bleu[3],
                "ROUGEL": it.rouge_l,
                "CIDEr": it.cider,
            });
            let _ = writeln!(s, "{rec}");
        }
        s
    }
}

/// Scores tokenized hypotheses against reference sets.
pub fn score_corpus(clip_ids: &[String], hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<MetricReport> {
    let b = metrics::bleu(hyps, refs, 4)?;
    let rouge = metrics::rouge_l_items(hyps, refs);
    let cider = metrics::cider_items(hyps, refs)?;
    let items = hyps
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let sb = metrics::bleu(std::slice::from_ref(h), std::slice::from_ref(&refs[i]), 4)?;
            Ok(ItemScores {
                clip_id: clip_ids.get(i).cloned().unwrap_or_default(),
                hypothesis: h.join(" "),
                bleu: [sb[0], sb[1], sb[2], sb[3]],
                rouge_l: rouge[i],
                cider: cider[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        bleu: [b[0], b[1], b[2], b[3]],
        rouge_l: rouge.iter().sum::<f64>() / rouge.len() as f64,
        cider: cider.iter().sum::<f64>() / cider.len() as f64,
        items,
    })
}

/// Decodes every clip of `data` and scores it against its references.
pub fn evaluate_model(
    model: &mut CaptionModel<f32>,
    vocab: &Vocabulary,
    data: &TrainingSet,
    opts: &DecodeOptions,
) -> Result<MetricReport> {
    if data.clips() == 0 {
        return Err(Error::EmptyCorpus("test set has no clips".into()));
    }
    let hyps = caption_clips(model, &data.mels, opts)?;
    let tokens: Vec<Vec<String>> = hyps.iter().map(|h| decode_caption(&h.tokens, vocab)).collect();
    score_corpus(&data.clip_ids, &tokens, &data.references)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: DecodeMode,
    pub report: MetricReport,
    pub test_loss: f64,
}

/// One row per evaluated model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},test_loss\n", MetricReport::csv_header());
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6}", r.report.csv_row(r.mode.as_str()), r.test_loss);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12}", "model");
        for c in METRIC_COLUMNS {
            let _ = write!(s, " {c:>8}");
        }
        s.push_str("  test_loss\n");
        for r in &self.rows {
            let _ = write!(s, "{:<12}", r.mode.as_str());
            for v in r.report.values() {
                let _ = write!(s, " {v:>8.4}");
            }
            let _ = writeln!(s, "  {:>9.4}", r.test_loss);
        }
        s
    }
}

/// Loads one checkpoint per mode, checking that all exist and share one
/// vocabulary. Each model is switched to the mode it is listed under.
pub fn load_ablation_models(
    checkpoints: &[(DecodeMode, Option<PathBuf>)],
) -> Result<(Vocabulary, Vec<(DecodeMode, Loaded)>)> {
    let missing: Vec<String> = checkpoints
        .iter()
        .filter(|(_, p)| p.as_deref().is_none_or(|p| !p.is_file()))
        .map(|(m, p)| match p {
            Some(p) => format!("{m} ({})", p.display()),
            None => m.to_string(),
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing checkpoint for: {}", missing.join(", "))));
    }
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints given".into()));
    }
    let mut loaded = Vec::with_capacity(checkpoints.len());
    for (mode, path) in checkpoints {
        let mut l = Loaded::load(path.as_deref().expect("checked above"))?;
        l.model.set_mode(*mode);
        loaded.push((*mode, l));
    }
    let hash = loaded[0].1.vocab.hash();
    if loaded.iter().any(|(_, l)| l.vocab.hash() != hash) {
        return Err(Error::VocabMismatch(
            "ablation checkpoints use different vocabularies".into(),
        ));
    }
    Ok((loaded[0].1.vocab.clone(), loaded))
}

/// Scores every loaded model on `data`.
pub fn ablation_table(
    models: Vec<(DecodeMode, Loaded)>,
    vocab: &Vocabulary,
    data: &TrainingSet,
    opts: &DecodeOptions,
) -> Result<AblationTable> {
    if data.clips() == 0 {
        return Err(Error::EmptyCorpus("test set is empty".into()));
    }
    let mut table = AblationTable::default();
    for (mode, mut l) in models {
        let report = evaluate_model(&mut l.model, vocab, data, opts)?;
        let test_loss = evaluate_normalized_loss(&mut l.model, data, opts.batch)?;
        table.rows.push(AblationRow {
            mode,
            report,
            test_loss,
        });
    }
    Ok(table)
}

/// Evaluates one checkpoint per mode on the same test manifest. Each model
/// decodes with the mode it was trained in; all must share one vocabulary.
pub fn run_ablation_eval(
    checkpoints: &[(DecodeMode, Option<PathBuf>)],
    test: &DatasetManifest,
    opts: &DecodeOptions,
) -> Result<AblationTable> {
    let (vocab, models) = load_ablation_models(checkpoints)?;
    if test.is_empty() {
        return Err(Error::EmptyCorpus("test manifest is empty".into()));
    }
    let data = TrainingSet::from_manifest(test, &vocab, &MelConfig::default(), DEFAULT_MAX_LEN)?;
    ablation_table(models, &vocab, &data, opts)
}

/// Writes `metrics.csv` (one row) and `items.jsonl` under `dir`.
pub fn write_report(dir: &Path, label: &str, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row(label)),
    )?;
    std::fs::write(dir.join("items.jsonl"), report.to_jsonl())?;
    Ok(())
}
