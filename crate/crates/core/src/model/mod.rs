//! The full captioning model: encoder, shared embedding and two decoders.

mod decoder;
mod encoder;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::audio::MelBatch;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub use decoder::{
    positional_encoding, read_wemb, write_wemb, DecoderConfig, DecoderLayer, EmbeddingMode, TransformerDecoder,
    WordEmbedding, WEMB_MAGIC, WEMB_VERSION,
};
pub use encoder::{pooled_len, ConvBlock, Encoder, EncoderConfig, EncoderVars, MIN_FRAMES};

/// Which decoders contribute to the output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// Both decoders; log-probabilities are summed.
    #[default]
    Dual,
    /// Only the decoder reading the fused feature.
    FusionOnly,
    /// Only the decoder reading the high-level feature.
    HighOnly,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Dual, DecodeMode::FusionOnly, DecodeMode::HighOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Dual => "dual",
            DecodeMode::FusionOnly => "fusion-only",
            DecodeMode::HighOnly => "high-only",
        }
    }

    pub fn uses_fusion_decoder(self) -> bool {
        self != DecodeMode::HighOnly
    }

    pub fn uses_high_decoder(self) -> bool {
        self != DecodeMode::FusionOnly
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "dual" => Ok(DecodeMode::Dual),
            "fusion-only" => Ok(DecodeMode::FusionOnly),
            "high-only" => Ok(DecodeMode::HighOnly),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mode: DecodeMode,
    pub use_low: bool,
    pub trainable_embedding: bool,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::with_vocab(vocab),
            mode: DecodeMode::Dual,
            use_low: true,
            trainable_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> String {
        let e = &self.encoder;
        let d = &self.decoder;
        let channels = e.channels.map(|c| c.to_string()).join(",");
        format!(
            "vocab = {}\nn_mels = {}\nchannels = {channels}\nhidden = {}\nwidth = {}\nheads = {}\n\
             layers = {}\nffn = {}\ndropout = {}\nmode = {}\nuse_low = {}\ntrainable_embedding = {}\n",
            d.vocab,
            e.n_mels,
            e.hidden,
            e.width,
            d.heads,
            d.layers,
            d.ffn,
            d.dropout,
            self.mode,
            self.use_low,
            self.trainable_embedding
        )
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        use crate::config::require;
        let channels: Vec<usize> = require::<String>(pairs, "channels")?
            .split(',')
            .map(|c| crate::config::parse_value("channels", c.trim()))
            .collect::<Result<_>>()?;
        let channels: [usize; 4] = channels
            .try_into()
            .map_err(|_| Error::Config("channels needs four entries".into()))?;
        let width = require(pairs, "width")?;
        Ok(Self {
            encoder: EncoderConfig {
                n_mels: require(pairs, "n_mels")?,
                channels,
                hidden: require(pairs, "hidden")?,
                width,
            },
            decoder: DecoderConfig {
                vocab: require(pairs, "vocab")?,
                width,
                heads: require(pairs, "heads")?,
                layers: require(pairs, "layers")?,
                ffn: require(pairs, "ffn")?,
                dropout: require(pairs, "dropout")?,
            },
            mode: require::<String>(pairs, "mode")?.parse()?,
            use_low: require(pairs, "use_low")?,
            trainable_embedding: require(pairs, "trainable_embedding")?,
        })
    }
}

/// Tape handles produced by one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub encoder: EncoderVars,
    pub p_td1: Option<Var>,
    pub p_td2: Option<Var>,
    /// `p_td1 + p_td2` in dual mode, otherwise the single decoder's output.
    pub p_fusion: Var,
}

/// Encoder features detached from any tape, reused across decoding steps.
#[derive(Debug, Clone)]
pub struct Memory<S: Scalar> {
    pub fusion: Tensor<S>,
    pub high: Tensor<S>,
    pub valid: Vec<usize>,
}

impl<S: Scalar> Memory<S> {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    fn gather(t: &Tensor<S>, items: &[usize]) -> Tensor<S> {
        let s = t.shape();
        let row = s[1] * s[2];
        let mut data = Vec::with_capacity(items.len() * row);
        for &i in items {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        Tensor::new(vec![items.len(), s[1], s[2]], data).expect("gathered rows")
    }
}

/// Splits padded caption rows `[b, l]` into decoder inputs `[b, l-1]`,
/// targets `[b, l-1]` and a non-pad flag per target.
pub fn teacher_forcing(ids: &[usize], b: usize, l: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<bool>)> {
    if l < 2 || ids.len() != b * l {
        return Err(Error::Shape(format!(
            "caption batch needs {b} rows of length >= 2, got {} ids for length {l}",
            ids.len()
        )));
    }
    let mut inputs = Vec::with_capacity(b * (l - 1));
    let mut targets = Vec::with_capacity(b * (l - 1));
    for row in ids.chunks(l) {
        inputs.extend_from_slice(&row[..l - 1]);
        targets.extend_from_slice(&row[1..]);
    }
    let valid = targets.iter().map(|&t| t != crate::text::PAD).collect();
    Ok((inputs, targets, valid))
}

/// Packs a mel batch as a single-channel image batch `[b, 1, t, n_mels]`.
pub fn mel_tensor<S: Scalar>(mel: &MelBatch) -> Tensor<S> {
    Tensor::from_fn(&[mel.batch, 1, mel.frames, mel.n_mels], |i| S::lit(mel.data[i] as f64))
}

#[derive(Debug, Clone)]
pub struct CaptionModel<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub encoder: Encoder,
    pub embedding: WordEmbedding,
    pub td1: TransformerDecoder,
    pub td2: TransformerDecoder,
}

impl<S: Scalar> CaptionModel<S> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.encoder.width != config.decoder.width {
            return Err(Error::Config(format!(
                "encoder width {} differs from decoder width {}",
                config.encoder.width, config.decoder.width
            )));
        }
        if config.decoder.vocab < 4 {
            return Err(Error::Config("vocabulary must hold the four reserved tokens".into()));
        }
        let mut store = ParamStore::new();
        let mut encoder = Encoder::new(&mut store, config.encoder.clone(), rng)?;
        encoder.use_low = config.use_low;
        let d = &config.decoder;
        let embedding = WordEmbedding::new(&mut store, d.vocab, d.width, rng);
        if config.trainable_embedding {
            store.set_kind(embedding.table.weight, ParamKind::Trainable);
        }
        let td1 = TransformerDecoder::new(&mut store, "td1", d, rng)?;
        let td2 = TransformerDecoder::new(&mut store, "td2", d, rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            embedding,
            td1,
            td2,
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<T: Scalar>(&self) -> CaptionModel<T> {
        CaptionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            embedding: self.embedding.clone(),
            td1: self.td1.clone(),
            td2: self.td2.clone(),
        }
    }

    pub fn mode(&self) -> DecodeMode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: DecodeMode) {
        self.config.mode = mode;
    }

    pub fn set_use_low(&mut self, on: bool) {
        self.config.use_low = on;
        self.encoder.use_low = on;
    }

    pub fn set_embedding_mode(&mut self, mode: &EmbeddingMode) -> Result<()> {
        self.embedding.apply_mode(&mut self.store, mode)?;
        self.config.trainable_embedding = *mode == EmbeddingMode::Trainable;
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.config.decoder.vocab
    }

    pub fn encode(&mut self, tape: &mut Tape<S>, mel: &MelBatch) -> Result<EncoderVars> {
        let x = tape.constant(mel_tensor(mel));
        self.encoder.forward(tape, &mut self.store, x, &mel.lengths)
    }

    /// Runs the decoders selected by the current mode on embedded `ids: [b, l]`.
    pub fn decode(
        &self,
        tape: &mut Tape<S>,
        fusion: Var,
        high: Var,
        valid: &[usize],
        ids: &[usize],
        b: usize,
        l: usize,
    ) -> Result<(Option<Var>, Option<Var>, Var)> {
        let mode = self.config.mode;
        let dropout = self.config.decoder.dropout;
        let x = self.embedding.forward(tape, &self.store, ids, b, l)?;
        let p1 = if mode.uses_fusion_decoder() {
            Some(self.td1.forward(tape, &self.store, x, fusion, valid, dropout)?)
        } else {
            None
        };
        let p2 = if mode.uses_high_decoder() {
            Some(self.td2.forward(tape, &self.store, x, high, valid, dropout)?)
        } else {
            None
        };
        let pf = match (p1, p2) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("every mode uses a decoder"),
        };
        Ok((p1, p2, pf))
    }

    /// Teacher-forced pass; `ids` are padded caption rows `[b, l]` starting with `<sos>`.
    pub fn forward(&mut self, tape: &mut Tape<S>, mel: &MelBatch, ids: &[usize], l: usize) -> Result<ModelOutputs> {
        let b = mel.batch;
        let encoder = self.encode(tape, mel)?;
        let (p_td1, p_td2, p_fusion) =
            self.decode(tape, encoder.x_fusion, encoder.x_high, &encoder.valid, ids, b, l)?;
        Ok(ModelOutputs {
            encoder,
            p_td1,
            p_td2,
            p_fusion,
        })
    }

    /// Fused cross-entropy over non-pad targets. Returns the loss and the pass outputs.
    pub fn loss(&mut self, tape: &mut Tape<S>, mel: &MelBatch, ids: &[usize], l: usize) -> Result<(Var, ModelOutputs)> {
        let (inputs, targets, valid) = teacher_forcing(ids, mel.batch, l)?;
        let out = self.forward(tape, mel, &inputs, l - 1)?;
        let loss = fused_ce_loss(tape, out.p_fusion, &targets, &valid)?;
        Ok((loss, out))
    }

    /// Encodes a batch in evaluation mode and keeps the decoder memories.
    pub fn memory(&mut self, mel: &MelBatch) -> Result<Memory<S>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, mel)?;
        Ok(Memory {
            fusion: tape.value(enc.x_fusion).clone(),
            high: tape.value(enc.x_high).clone(),
            valid: enc.valid,
        })
    }

    /// Fused log-scores for the next token after each prefix. All prefixes
    /// must share one length; `items[i]` selects the memory row of prefix `i`.
    pub fn next_token_scores(
        &self,
        memory: &Memory<S>,
        items: &[usize],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<Vec<f64>>> {
        let b = prefixes.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let l = prefixes[0].len();
        if l == 0 || prefixes.iter().any(|p| p.len() != l) || items.len() != b {
            return Err(Error::Shape("prefixes must be non-empty and of equal length".into()));
        }
        let mut tape = Tape::new();
        let fusion = tape.constant(Memory::gather(&memory.fusion, items));
        let high = tape.constant(Memory::gather(&memory.high, items));
        let valid: Vec<usize> = items.iter().map(|&i| memory.valid[i]).collect();
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let (_, _, pf) = self.decode(&mut tape, fusion, high, &valid, &ids, b, l)?;
        let m = self.vocab();
        let data = tape.value(pf).data();
        Ok((0..b)
            .map(|i| {
                let row = &data[(i * l + l - 1) * m..(i * l + l) * m];
                row.iter().map(|v| v.as_f64()).collect()
            })
            .collect())
    }

    /// Zeroes the block-3 projection so the fused feature reduces to the high one.
    pub fn zero_low_projection(&mut self) {
        for id in [self.encoder.f_low.weight, self.encoder.f_low.bias] {
            let p = self.store.get_mut(id);
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Overwrites the fusion decoder's parameters with the high decoder's.
    pub fn tie_fusion_decoder_to_high(&mut self) -> Result<()> {
        let pairs: Vec<_> = self
            .store
            .iter()
            .filter_map(|(id, p)| {
                p.name()
                    .strip_prefix(&self.td2.prefix)
                    .map(|rest| (id, format!("{}{rest}", self.td1.prefix)))
            })
            .collect();
        for (src, dst_name) in pairs {
            let dst = self
                .store
                .find(&dst_name)
                .ok_or_else(|| Error::Config(format!("no parameter {dst_name}")))?;
            let v = self.store.get(src).value().clone();
            self.store.set_value(dst, v)?;
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamReport {
        let rows: Vec<ParamRow> = self
            .store
            .iter()
            .filter(|(_, p)| p.kind() != ParamKind::Buffer)
            .map(|(_, p)| ParamRow {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                count: p.value().numel(),
            })
            .collect();
        let encoder = rows
            .iter()
            .filter(|r| r.name.starts_with("encoder."))
            .map(|r| r.count)
            .sum();
        let total: usize = rows.iter().map(|r| r.count).sum();
        ParamReport {
            rows,
            encoder,
            decoder: total - encoder,
        }
    }
}

/// Mean of `-log_probs[target]` over non-pad targets.
pub fn fused_ce_loss<S: Scalar>(tape: &mut Tape<S>, log_probs: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
    tape.nll(log_probs, targets, valid)
}

/// Fuses two logit tensors: `(log_softmax(a), log_softmax(b), sum)`.
pub fn fuse_logits<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<(Var, Var, Var)> {
    let pa = tape.log_softmax(a)?;
    let pb = tape.log_softmax(b)?;
    let pf = tape.add(pa, pb)?;
    Ok((pa, pb, pf))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub encoder: usize,
    pub decoder: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder
    }

    /// Weight plus bias count of the layer whose parameters start with `layer.`.
    pub fn layer(&self, layer: &str) -> usize {
        let prefix = format!("{layer}.");
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(&prefix))
            .map(|r| r.count)
            .sum()
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{:<40} {:>18} {:>10}", r.name, format!("{:?}", r.shape), r.count)?;
        }
        writeln!(f, "encoder total {}", self.encoder)?;
        writeln!(f, "decoder total {}", self.decoder)?;
        write!(f, "total {}", self.total())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts_of_named_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CaptionModel::<f32>::new(ModelConfig::new(20), &mut rng).unwrap();
        let report = model.count_parameters();
        assert_eq!(report.layer("encoder.f_1024"), 525_312);
        assert_eq!(report.layer("encoder.f_high"), 131_200);
        assert_eq!(report.layer("encoder.block1.conv1"), 640);
        assert_eq!(report.total(), report.rows.iter().map(|r| r.count).sum::<usize>());
        assert!(report.rows.iter().all(|r| !r.name.contains("running")));
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::new(31);
        cfg.mode = DecodeMode::HighOnly;
        cfg.encoder.channels = [4, 8, 8, 16];
        let back = ModelConfig::from_kv(&crate::config::parse_kv(&cfg.to_kv()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DecodeMode::ALL {
            assert_eq!(m.as_str().parse::<DecodeMode>().unwrap(), m);
        }
        assert_eq!("fusion_only".parse::<DecodeMode>().unwrap(), DecodeMode::FusionOnly);
        assert!("both".parse::<DecodeMode>().is_err());
    }

    #[test]
    fn teacher_forcing_shifts_rows() {
        let (i, t, v) = teacher_forcing(&[1, 5, 2, 0, 1, 6, 7, 2], 2, 4).unwrap();
        assert_eq!(i, vec![1, 5, 2, 1, 6, 7]);
        assert_eq!(t, vec![5, 2, 0, 6, 7, 2]);
        assert_eq!(v, vec![true, true, false, true, true, true]);
    }
}
