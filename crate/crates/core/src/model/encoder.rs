//! CNN10-style convolutional encoder with a block-3 shortcut.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv3x3, Linear, ParamStore};
use crate::tensor::Scalar;

/// Smallest input length that survives four 2x2 pools.
pub const MIN_FRAMES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: [64, 128, 256, 512],
            hidden: 1024,
            width: 128,
        }
    }
}

/// conv-bn-relu twice, then 2x2 average pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv3x3,
    pub bn1: BatchNorm2d,
    pub conv2: Conv3x3,
    pub bn2: BatchNorm2d,
    pub channels: usize,
}

impl ConvBlock {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), c_in, c_out, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), c_out, c_out, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out),
            channels: c_out,
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &mut ParamStore<S>, x: Var) -> Result<Var> {
        let x = self.conv1.forward(tape, store, x)?;
        let x = self.bn1.forward(tape, store, x)?;
        let x = tape.relu(x);
        let x = self.conv2.forward(tape, store, x)?;
        let x = self.bn2.forward(tape, store, x)?;
        let x = tape.relu(x);
        tape.avg_pool2d(x)
    }
}

/// Tape handles for one encoder pass. Sequence tensors are `[batch, time, features]`.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// Block-3 output averaged over frequency, `[b, t', 256]`.
    pub x3: Var,
    /// Block-4 output after frequency pooling and the wide projection, `[b, t, 1024]`.
    pub x_final: Var,
    pub x_high: Var,
    /// Projected block-3 path before time alignment; `None` when disabled.
    pub x_low: Option<Var>,
    pub x_fusion: Var,
    /// Valid output frames per item.
    pub valid: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub f_1024: Linear,
    pub f_high: Linear,
    pub f_low: Linear,
    /// When false the block-3 shortcut is skipped and `x_fusion == x_high`.
    pub use_low: bool,
}

/// Length after `n` floor-halvings.
pub fn pooled_len(len: usize, n: u32) -> usize {
    len >> n
}

impl Encoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.n_mels < MIN_FRAMES {
            return Err(Error::Config(format!(
                "encoder needs at least {MIN_FRAMES} mel bins, got {}",
                config.n_mels
            )));
        }
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(4);
        for (i, &c) in config.channels.iter().enumerate() {
            blocks.push(ConvBlock::new(store, &format!("encoder.block{}", i + 1), c_in, c, rng));
            c_in = c;
        }
        let [_, _, c3, c4] = config.channels;
        let f_1024 = Linear::new(store, "encoder.f_1024", c4, config.hidden, rng);
        let f_high = Linear::new(store, "encoder.f_high", config.hidden, config.width, rng);
        let f_low = Linear::new(store, "encoder.f_low", c3, config.width, rng);
        Ok(Self {
            config,
            blocks,
            f_1024,
            f_high,
            f_low,
            use_low: true,
        })
    }

    /// `mel: [b, 1, t_in, n_mels]`; `lengths` are the unpadded frame counts.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        mel: Var,
        lengths: &[usize],
    ) -> Result<EncoderVars> {
        let s = tape.shape(mel).to_vec();
        if s.len() != 4 || s[1] != 1 || s[3] != self.config.n_mels || lengths.len() != s[0] {
            return Err(Error::Shape(format!(
                "encoder expects [b, 1, t, {}] with {} lengths, got {s:?}",
                self.config.n_mels,
                lengths.len()
            )));
        }
        if s[2] < MIN_FRAMES {
            return Err(Error::TooShort(format!(
                "{} frames, encoder needs at least {MIN_FRAMES}",
                s[2]
            )));
        }
        let mut x = mel;
        let mut x3_map = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x)?;
            if i == 2 {
                x3_map = Some(x);
            }
        }
        let x3_map = x3_map.expect("four blocks");
        let seq = |tape: &mut Tape<S>, v: Var| -> Result<Var> {
            let v = tape.mean_axis(v, 3)?;
            tape.permute(v, &[0, 2, 1])
        };
        let x3 = seq(tape, x3_map)?;
        let x4 = seq(tape, x)?;
        let x_final = self.f_1024.forward(tape, store, x4)?;
        let high = self.f_high.forward(tape, store, x_final)?;
        let x_high = tape.relu(high);
        let t = tape.shape(x_high)[1];

        let (x_low, x_fusion) = if self.use_low {
            let low = self.f_low.forward(tape, store, x3)?;
            let low = tape.relu(low);
            let aligned = tape.align_time(low, t)?;
            (Some(low), tape.add(x_high, aligned)?)
        } else {
            (None, x_high)
        };
        let valid = lengths.iter().map(|&l| pooled_len(l, 4).clamp(1, t)).collect();
        Ok(EncoderVars {
            x3,
            x_final,
            x_high,
            x_low,
            x_fusion,
            valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            n_mels: 16,
            channels: [4, 4, 8, 8],
            hidden: 16,
            width: 8,
        };
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn output_shapes_follow_pooling_chain() {
        let (mut store, enc) = small();
        let mut tape = Tape::new();
        let mel = tape.constant(Tensor::from_fn(&[2, 1, 37, 16], |i| (i as f64 * 0.1).sin()));
        let out = enc.forward(&mut tape, &mut store, mel, &[37, 20]).unwrap();
        assert_eq!(tape.shape(out.x3), &[2, 4, 8]);
        assert_eq!(tape.shape(out.x_final), &[2, 2, 16]);
        assert_eq!(tape.shape(out.x_fusion), &[2, 2, 8]);
        assert_eq!(out.valid, vec![2, 1]);
        assert!(tape.value(out.x_high).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn short_input_is_rejected() {
        let (mut store, enc) = small();
        let mut tape = Tape::new();
        let mel = tape.constant(Tensor::zeros(&[1, 1, 15, 16]));
        assert!(matches!(
            enc.forward(&mut tape, &mut store, mel, &[15]),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn constant_input_gives_identical_rows() {
        let (mut store, enc) = small();
        let mut tape = Tape::new();
        let mel = tape.constant(Tensor::zeros(&[1, 1, 64, 16]));
        let out = enc.forward(&mut tape, &mut store, mel, &[64]).unwrap();
        let h = tape.value(out.x_high).data();
        assert_eq!(&h[..8], &h[8..16]);
    }

    #[test]
    fn disabled_shortcut_passes_high_through() {
        let (mut store, mut enc) = small();
        enc.use_low = false;
        let mut tape = Tape::new();
        let mel = tape.constant(Tensor::from_fn(&[1, 1, 32, 16], |i| (i as f64).cos()));
        let out = enc.forward(&mut tape, &mut store, mel, &[32]).unwrap();
        assert_eq!(out.x_fusion, out.x_high);
        assert!(out.x_low.is_none());
    }
}
