//! Post-norm transformer decoder stacks and the shared word embedding.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::autograd::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Embedding, LayerNorm, Linear, MultiHeadAttention, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn with_vocab(vocab: usize) -> Self {
        Self {
            vocab,
            width: 128,
            heads: 4,
            layers: 2,
            ffn: 512,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let w = cfg.width;
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), w, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), w),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), w, cfg.heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), w),
            ff1: Linear::new(store, &format!("{name}.ff1"), w, cfg.ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn, w, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), w),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        memory: Var,
        causal: &AttentionMask,
        memory_mask: &AttentionMask,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, store, x, x, Some(causal))?;
        let a = tape.dropout(a, dropout);
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;

        let c = self.cross_attn.forward(tape, store, x, memory, Some(memory_mask))?;
        let c = tape.dropout(c, dropout);
        let x = tape.add(x, c)?;
        let x = self.norm2.forward(tape, store, x)?;

        let h = self.ff1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.ff2.forward(tape, store, h)?;
        let h = tape.dropout(h, dropout);
        let x = tape.add(x, h)?;
        self.norm3.forward(tape, store, x)
    }
}

/// A decoder stack with its vocabulary head.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
    pub prefix: String,
}

impl TransformerDecoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, &format!("{name}.head"), cfg.width, cfg.vocab, rng);
        Ok(Self {
            layers,
            head,
            prefix: format!("{name}."),
        })
    }

    /// `tokens: [b, l, width]` embedded input, `memory: [b, t, width]`.
    /// Returns log-probabilities `[b, l, vocab]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: Var,
        memory: Var,
        memory_valid: &[usize],
        dropout: f64,
    ) -> Result<Var> {
        let (b, l) = (tape.shape(tokens)[0], tape.shape(tokens)[1]);
        let t = tape.shape(memory)[1];
        let causal = AttentionMask::causal(b, l);
        let memory_mask = AttentionMask::key_lengths(l, t, memory_valid);
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, memory, &causal, &memory_mask, dropout)?;
        }
        let logits = self.head.forward(tape, store, x)?;
        tape.log_softmax(logits)
    }
}

/// How the shared word embedding is initialized and whether it trains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingMode {
    Frozen,
    Trainable,
    /// Loaded from a `WEMB` table, then frozen.
    Imported(std::path::PathBuf),
}

/// Shared token embedding, scaled by `sqrt(d)` and offset by sinusoidal positions.
#[derive(Debug, Clone)]
pub struct WordEmbedding {
    pub table: Embedding,
}

impl WordEmbedding {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, vocab: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Embedding::new(store, "embedding", vocab, width, ParamKind::Frozen, rng),
        }
    }

    pub fn apply_mode<S: Scalar>(&self, store: &mut ParamStore<S>, mode: &EmbeddingMode) -> Result<()> {
        match mode {
            EmbeddingMode::Frozen => store.set_kind(self.table.weight, ParamKind::Frozen),
            EmbeddingMode::Trainable => store.set_kind(self.table.weight, ParamKind::Trainable),
            EmbeddingMode::Imported(path) => {
                let table = read_wemb(path)?;
                if table.shape() != [self.table.vocab, self.table.width] {
                    return Err(Error::Config(format!(
                        "embedding table {} is {:?}, model needs [{}, {}]",
                        path.display(),
                        table.shape(),
                        self.table.vocab,
                        self.table.width
                    )));
                }
                store.set_value(self.table.weight, table.cast())?;
                store.set_kind(self.table.weight, ParamKind::Frozen);
            }
        }
        Ok(())
    }

    /// `ids` is a row-major `[b, l]` matrix.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[usize],
        b: usize,
        l: usize,
    ) -> Result<Var> {
        let e = self.table.forward(tape, store, ids, &[b, l])?;
        let e = tape.scale(e, (self.table.width as f64).sqrt());
        let pe = tape.constant(positional_encoding(b, l, self.table.width));
        tape.add(e, pe)
    }
}

/// Sinusoidal positions broadcast to `[b, l, d]`.
pub fn positional_encoding<S: Scalar>(b: usize, l: usize, d: usize) -> Tensor<S> {
    Tensor::from_fn(&[b, l, d], |i| {
        let pos = (i / d) % l;
        let j = i % d;
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        S::lit(if j.is_multiple_of(2) { angle.sin() } else { angle.cos() })
    })
}

pub const WEMB_MAGIC: &[u8; 4] = b"WEMB";
pub const WEMB_VERSION: u16 = 1;

pub fn write_wemb(path: &Path, table: &Tensor<f32>) -> Result<()> {
    if table.rank() != 2 {
        return Err(Error::Shape("embedding table must be [V, d]".into()));
    }
    let mut buf = Vec::with_capacity(14 + table.numel() * 4);
    buf.extend_from_slice(WEMB_MAGIC);
    buf.extend_from_slice(&WEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.shape()[0] as u32).to_le_bytes());
    buf.extend_from_slice(&(table.shape()[1] as u32).to_le_bytes());
    for v in table.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_wemb(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 14 || &bytes[..4] != WEMB_MAGIC {
        return Err(Error::Integrity {
            offset: 0,
            reason: "not a WEMB embedding table".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEMB_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: WEMB_VERSION,
        });
    }
    let v = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[14..];
    if payload.len() != v * d * 4 {
        return Err(Error::Integrity {
            offset: bytes.len() as u64,
            reason: format!("expected {} payload bytes", v * d * 4),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![v, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_first_row() {
        let pe: Tensor<f64> = positional_encoding(1, 2, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn imported_table_is_loaded_and_frozen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.wemb");
        let table = Tensor::from_fn(&[6, 8], |i| i as f32 * 0.5);
        write_wemb(&path, &table).unwrap();

        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = WordEmbedding::new(&mut store, 6, 8, &mut rng);
        emb.apply_mode(&mut store, &EmbeddingMode::Imported(path.clone()))
            .unwrap();
        assert_eq!(store.get(emb.table.weight).value(), &table);
        assert_eq!(store.get(emb.table.weight).kind(), ParamKind::Frozen);

        let wrong = WordEmbedding {
            table: Embedding::new(&mut store, "other", 6, 4, ParamKind::Frozen, &mut rng),
        };
        assert!(matches!(
            wrong.apply_mode(&mut store, &EmbeddingMode::Imported(path)),
            Err(Error::Config(_))
        ));
    }
}
