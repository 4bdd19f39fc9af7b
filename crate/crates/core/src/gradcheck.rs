//! Central finite-difference checks of tape gradients in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::MelBatch;
use crate::autograd::{AttentionMask, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, DecoderConfig, EncoderConfig, ModelConfig};
use crate::nn::ParamId;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Instances per op in the default battery.
pub const DEFAULT_INSTANCES: usize = 20;

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
pub type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

/// One differentiable op under test: random inputs and the op applied to them.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub inputs: InputFn,
    pub apply: OpFn,
    /// Run on a training tape (fixed dropout seed, batch statistics).
    pub training: bool,
}

fn tape_for(training: bool) -> Tape<f64> {
    if training {
        Tape::training(0)
    } else {
        Tape::new()
    }
}

/// Scalar objective `sum(op(inputs) * w)` for a fixed random `w`.
fn objective(
    case: &OpCase,
    inputs: &[Tensor<f64>],
    weights: Option<&Tensor<f64>>,
    grad: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
    let mut tape = tape_for(case.training);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = (case.apply)(&mut tape, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tape.value(out).numel() as u64);
            Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0))
        }
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, w))
}

/// Worst relative error of one instance over every input element.
pub fn check_instance(case: &OpCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let (mut tape, vars, loss, w) = objective(case, inputs, None, true)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = match grads.get(*var) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = inputs.to_vec();
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + FD_STEP;
            let (t, _, up, _) = objective(case, &probe, Some(&w), false)?;
            let up = t.value(up).item();
            probe[k].data_mut()[j] = x0 - FD_STEP;
            let (t, _, down, _) = objective(case, &probe, Some(&w), false)?;
            let down = t.value(down).item();
            probe[k].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Outcome of checking one op or composite over several instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= FD_TOLERANCE
    }
}

pub fn check_case(case: &OpCase, instances: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = (case.inputs)(&mut rng);
        let e = check_instance(case, &inputs)?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradReport {
        name: case.name.to_string(),
        instances,
        worst,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform in [-1, 1] but kept away from zero so kinks are not straddled.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5)];
    vec![uniform(rng, &shape), uniform(rng, &shape)]
}

fn one_3d(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 5)];
    vec![uniform(rng, &shape)]
}

fn image(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)];
    vec![uniform(rng, &shape)]
}

fn mask_rows(b: usize, q: usize, k: usize) -> AttentionMask {
    let valid: Vec<usize> = (0..b).map(|i| 1 + (i * 7 + q) % k).collect();
    AttentionMask::key_lengths(q, k, &valid)
}

fn ids_for(shape: &[usize], vocab: usize) -> Vec<usize> {
    (0..shape.iter().product::<usize>())
        .map(|i| (i * 5 + 3) % vocab)
        .collect()
}

/// The default battery: one case per differentiable op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: two_same,
            apply: |t, v| t.add(v[0], v[1]),
            training: false,
        },
        OpCase {
            name: "mul",
            inputs: two_same,
            apply: |t, v| t.mul(v[0], v[1]),
            training: false,
        },
        OpCase {
            name: "scale",
            inputs: one_3d,
            apply: |t, v| Ok(t.scale(v[0], -1.7)),
            training: false,
        },
        OpCase {
            name: "relu",
            inputs: |rng| {
                let shape = [dim(rng, 1, 3), dim(rng, 2, 6)];
                vec![off_kink(rng, &shape)]
            },
            apply: |t, v| Ok(t.relu(v[0])),
            training: false,
        },
        OpCase {
            name: "sum",
            inputs: one_3d,
            apply: |t, v| Ok(t.sum(v[0])),
            training: false,
        },
        OpCase {
            name: "mean",
            inputs: one_3d,
            apply: |t, v| Ok(t.mean(v[0])),
            training: false,
        },
        OpCase {
            name: "reshape",
            inputs: |rng| {
                let shape = [2, dim(rng, 1, 3), 3];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| {
                let n = t.value(v[0]).numel();
                t.reshape(v[0], &[n / 2, 2])
            },
            training: false,
        },
        OpCase {
            name: "permute",
            inputs: |rng| {
                let shape = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| t.permute(v[0], &[0, 2, 1, 3]),
            training: false,
        },
        OpCase {
            name: "matmul",
            inputs: |rng| {
                let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                vec![uniform(rng, &[b, m, k]), uniform(rng, &[b, k, n])]
            },
            apply: |t, v| t.matmul(v[0], v[1], false),
            training: false,
        },
        OpCase {
            name: "matmul_transposed",
            inputs: |rng| {
                let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
                vec![uniform(rng, &[b, m, k]), uniform(rng, &[b, n, k])]
            },
            apply: |t, v| t.matmul(v[0], v[1], true),
            training: false,
        },
        OpCase {
            name: "dropout",
            inputs: one_3d,
            apply: |t, v| Ok(t.dropout(v[0], 0.3)),
            training: true,
        },
        OpCase {
            name: "linear",
            inputs: |rng| {
                let (b, l, din, dout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 5), dim(rng, 1, 4));
                vec![
                    uniform(rng, &[b, l, din]),
                    uniform(rng, &[dout, din]),
                    uniform(rng, &[dout]),
                ]
            },
            apply: |t, v| t.linear(v[0], v[1], v[2]),
            training: false,
        },
        OpCase {
            name: "conv2d",
            inputs: |rng| {
                let (n, ci, co, h, w) = (
                    dim(rng, 1, 2),
                    dim(rng, 1, 2),
                    dim(rng, 1, 3),
                    dim(rng, 1, 5),
                    dim(rng, 1, 5),
                );
                vec![
                    uniform(rng, &[n, ci, h, w]),
                    uniform(rng, &[co, ci, 3, 3]),
                    uniform(rng, &[co]),
                ]
            },
            apply: |t, v| t.conv2d(v[0], v[1], v[2]),
            training: false,
        },
        OpCase {
            name: "batch_norm2d",
            inputs: |rng| {
                let c = dim(rng, 1, 3);
                let shape = [dim(rng, 1, 2), c, dim(rng, 2, 4), dim(rng, 2, 4)];
                vec![uniform(rng, &shape), uniform(rng, &[c]), uniform(rng, &[c])]
            },
            apply: |t, v| {
                let c = t.shape(v[1])[0];
                let mut stats = RunningStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                };
                t.batch_norm2d(v[0], v[1], v[2], &mut stats)
            },
            training: true,
        },
        OpCase {
            name: "batch_norm2d_eval",
            inputs: |rng| {
                let c = dim(rng, 1, 3);
                let shape = [dim(rng, 1, 2), c, dim(rng, 1, 3), dim(rng, 1, 3)];
                vec![uniform(rng, &shape), uniform(rng, &[c]), uniform(rng, &[c])]
            },
            apply: |t, v| {
                let c = t.shape(v[1])[0];
                let mut stats = RunningStats {
                    mean: (0..c).map(|i| 0.1 * i as f64).collect(),
                    var: (0..c).map(|i| 0.5 + i as f64).collect(),
                };
                t.batch_norm2d(v[0], v[1], v[2], &mut stats)
            },
            training: false,
        },
        OpCase {
            name: "avg_pool2d",
            inputs: image,
            apply: |t, v| t.avg_pool2d(v[0]),
            training: false,
        },
        OpCase {
            name: "mean_axis",
            inputs: image,
            apply: |t, v| t.mean_axis(v[0], 3),
            training: false,
        },
        OpCase {
            name: "align_time",
            inputs: |rng| {
                let shape = [dim(rng, 1, 2), dim(rng, 2, 9), dim(rng, 1, 3)];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| {
                let src = t.shape(v[0])[1];
                t.align_time(v[0], src / 2)
            },
            training: false,
        },
        OpCase {
            name: "log_softmax",
            inputs: one_3d,
            apply: |t, v| t.log_softmax(v[0]),
            training: false,
        },
        OpCase {
            name: "softmax",
            inputs: one_3d,
            apply: |t, v| t.softmax(v[0], None),
            training: false,
        },
        OpCase {
            name: "softmax_masked",
            inputs: |rng| {
                let shape = [dim(rng, 1, 3), 2, dim(rng, 1, 4), dim(rng, 2, 5)];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| {
                let s = t.shape(v[0]).to_vec();
                let mask = mask_rows(s[0], s[2], s[3]);
                t.softmax(v[0], Some(&mask))
            },
            training: false,
        },
        OpCase {
            name: "layer_norm",
            inputs: |rng| {
                let shape = [dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 2, 6)];
                vec![
                    uniform(rng, &shape),
                    uniform(rng, &shape[2..]),
                    uniform(rng, &shape[2..]),
                ]
            },
            apply: |t, v| t.layer_norm(v[0], v[1], v[2]),
            training: false,
        },
        OpCase {
            name: "embedding",
            inputs: |rng| {
                let shape = [dim(rng, 2, 6), dim(rng, 1, 4)];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| {
                let vocab = t.shape(v[0])[0];
                let shape = [2, 3];
                t.embedding(v[0], &ids_for(&shape, vocab), &shape)
            },
            training: false,
        },
        OpCase {
            name: "nll",
            inputs: |rng| {
                let shape = [dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 6)];
                vec![uniform(rng, &shape)]
            },
            apply: |t, v| {
                let s = t.shape(v[0]).to_vec();
                let rows = s[0] * s[1];
                let targets: Vec<usize> = (0..rows).map(|i| (i * 3 + 1) % s[2]).collect();
                let valid: Vec<bool> = (0..rows).map(|i| i == 0 || i % 3 != 2).collect();
                t.nll(v[0], &targets, &valid)
            },
            training: false,
        },
    ]
}

/// Model configuration small enough for exhaustive-ish finite differences.
pub fn tiny_model_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab);
    cfg.encoder = EncoderConfig {
        n_mels: 16,
        channels: [2, 2, 3, 3],
        hidden: 6,
        width: 4,
    };
    cfg.decoder = DecoderConfig {
        width: 4,
        heads: 2,
        layers: 1,
        ffn: 6,
        ..DecoderConfig::with_vocab(vocab)
    };
    cfg.trainable_embedding = true;
    cfg
}

/// Random mel batch and padded caption rows for a tiny model.
pub fn tiny_batch(rng: &mut impl Rng, n_mels: usize, vocab: usize) -> (MelBatch, Vec<usize>, usize) {
    let (batch, frames, l) = (2, 32, 5);
    let lengths = vec![frames, rng.random_range(16..=frames)];
    let data = (0..batch * frames * n_mels)
        .map(|i| {
            if i / (frames * n_mels) == 1 && (i / n_mels) % frames >= lengths[1] {
                0.0
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        })
        .collect();
    let mel = MelBatch {
        data,
        batch,
        frames,
        n_mels,
        lengths,
    };
    let mut ids = vec![crate::text::PAD; batch * l];
    for b in 0..batch {
        let len = rng.random_range(2..l);
        ids[b * l] = crate::text::SOS;
        for slot in ids[b * l + 1..b * l + len].iter_mut() {
            *slot = rng.random_range(crate::text::RESERVED.len()..vocab);
        }
        ids[b * l + len] = crate::text::EOS;
    }
    (mel, ids, l)
}

fn model_loss(model: &mut CaptionModel<f64>, mel: &MelBatch, ids: &[usize], l: usize) -> Result<f64> {
    let mut tape = Tape::training(11);
    let (loss, _) = model.loss(&mut tape, mel, ids, l)?;
    Ok(tape.value(loss).item())
}

/// Checks d(loss)/d(params) of the full encoder and dual decoder on `coords`
/// randomly chosen trainable coordinates. Training mode with a fixed dropout seed.
pub fn check_model_instance(
    model: &mut CaptionModel<f64>,
    mel: &MelBatch,
    ids: &[usize],
    l: usize,
    coords: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    model.store.zero_grads();
    let mut tape = Tape::training(11);
    let (loss, _) = model.loss(&mut tape, mel, ids, l)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, &mut model.store);
    let trainable: Vec<(ParamId, usize)> = model
        .store
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .flat_map(|(id, p)| (0..p.value().numel()).map(move |j| (id, j)))
        .collect();
    if trainable.is_empty() {
        return Err(Error::Config("model has no trainable parameters".into()));
    }
    let mut analytic = Vec::with_capacity(coords);
    let mut numeric = Vec::with_capacity(coords);
    for _ in 0..coords {
        let (id, j) = trainable[rng.random_range(0..trainable.len())];
        analytic.push(model.store.get(id).grad().map_or(0.0, |g| g.data()[j]));
        let x0 = model.store.get(id).value().data()[j];
        model.store.get_mut(id).value_mut().data_mut()[j] = x0 + FD_STEP;
        let up = model_loss(model, mel, ids, l)?;
        model.store.get_mut(id).value_mut().data_mut()[j] = x0 - FD_STEP;
        let down = model_loss(model, mel, ids, l)?;
        model.store.get_mut(id).value_mut().data_mut()[j] = x0;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    model.store.zero_grads();
    Ok(relative_error(&analytic, &numeric))
}

/// Composite check over `instances` freshly initialized tiny models.
pub fn check_composite(instances: usize, coords: usize, seed: u64) -> Result<GradReport> {
    let vocab = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let cfg = tiny_model_config(vocab);
        let mut model = CaptionModel::<f64>::new(cfg.clone(), &mut rng)?;
        perturb_biases(&mut model, &mut rng);
        let (mel, ids, l) = tiny_batch(&mut rng, cfg.encoder.n_mels, vocab);
        let e = check_model_instance(&mut model, &mel, &ids, l, coords, &mut rng)?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradReport {
        name: "encoder+dual-decoder".into(),
        instances,
        worst,
    })
}

/// Zero-initialized biases give symmetric paths; jitter them so every
/// coordinate carries a distinct gradient.
fn perturb_biases(model: &mut CaptionModel<f64>, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.is_trainable() && p.name().ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for v in model.store.get_mut(id).value_mut().data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}
