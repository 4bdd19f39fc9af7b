//! Teacher-forced training, learning-rate schedule and checkpoints.

mod checkpoint;
mod data;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::audio::{augment_batch, AugmentPolicy, MelConfig};
use crate::config::{lookup, parse_kv, parse_value, require};
use crate::error::{Error, Result};
use crate::model::{teacher_forcing, CaptionModel, DecodeMode, ModelConfig};
use crate::optim::{clip_grad_norm, AdamState};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Tensor;
use crate::text::{Vocabulary, DEFAULT_MAX_LEN};
use crate::Tape;

pub use checkpoint::{Entry, TensorFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{tokenize_all, Example, TrainingSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Count decay periods from the end of warmup instead of from epoch 0.
    pub decay_after_warmup: bool,
    pub seed: u64,
    pub mode: DecodeMode,
    pub use_low: bool,
    pub trainable_embedding: bool,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub augment: bool,
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
    pub mixture_probability: f64,
    pub dropout: f64,
    pub max_len: usize,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let policy = AugmentPolicy::default();
        Self {
            batch_size: 32,
            epochs: 30,
            base_lr: 5e-4,
            warmup_epochs: 5,
            decay_every: 10,
            decay_factor: 0.1,
            decay_after_warmup: false,
            seed: 0,
            mode: DecodeMode::Dual,
            use_low: true,
            trainable_embedding: false,
            clip_norm: 1.0,
            augment: true,
            time_masks: policy.time_masks,
            max_time_width: policy.max_time_width,
            freq_masks: policy.freq_masks,
            max_freq_width: policy.max_freq_width,
            mixture_probability: policy.mixture_probability,
            dropout: 0.1,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
        }
    }
}

macro_rules! kv_fields {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            /// Sets one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => self.$field = parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown training key {other:?}"))),
                }
                Ok(())
            }

            /// `key = value` lines for every field.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $(s.push_str(&format!("{} = {}\n", stringify!($field), self.$field));)*
                s
            }
        }
    };
}

kv_fields!(
    batch_size,
    epochs,
    base_lr,
    warmup_epochs,
    decay_every,
    decay_factor,
    decay_after_warmup,
    seed,
    mode,
    use_low,
    trainable_embedding,
    clip_norm,
    augment,
    time_masks,
    max_time_width,
    freq_masks,
    max_freq_width,
    mixture_probability,
    dropout,
    max_len,
    min_count,
);

impl TrainConfig {
    /// Defaults with warmup and decay period rescaled from 30 epochs to `epochs`.
    pub fn scaled_to(epochs: usize) -> Self {
        let base = Self::default();
        let scale = |v: usize| ((v * epochs) as f64 / base.epochs as f64).round() as usize;
        Self {
            epochs,
            warmup_epochs: scale(base.warmup_epochs).min(epochs.saturating_sub(1)),
            decay_every: scale(base.decay_every).max(1),
            ..base
        }
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be finite and non-negative");
        }
        if self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs must be smaller than epochs");
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_every must be positive and decay_factor in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.mixture_probability) {
            return fail("dropout must be in [0, 1) and mixture_probability in [0, 1]");
        }
        if self.max_len < 3 || self.min_count == 0 {
            return fail("max_len must be at least 3 and min_count positive");
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch and step within it.
    ///
    /// Linear per-step warmup reaching `base_lr` on the last warmup step,
    /// then `base_lr * decay_factor^k` with `k = epoch / decay_every`
    /// (or `(epoch - warmup) / decay_every` when decay counts from warmup).
    pub fn lr_at(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let spe = steps_per_epoch.max(1);
        if epoch < self.warmup_epochs {
            let global = epoch * spe + step;
            return self.base_lr * (global + 1) as f64 / (self.warmup_epochs * spe) as f64;
        }
        let clock = if self.decay_after_warmup {
            epoch - self.warmup_epochs
        } else {
            epoch
        };
        self.base_lr * self.decay_factor.powi((clock / self.decay_every) as i32)
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            time_masks: self.time_masks,
            max_time_width: self.max_time_width,
            freq_masks: self.freq_masks,
            max_freq_width: self.max_freq_width,
            mixture_probability: self.mixture_probability,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        let mut m = ModelConfig::new(vocab);
        m.mode = self.mode;
        m.use_low = self.use_low;
        m.trainable_embedding = self.trainable_embedding;
        m.decoder.dropout = self.dropout;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub val_loss: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} lr={} loss={}",
            self.epoch, self.step, self.lr, self.loss
        )?;
        if let Some(v) = self.val_loss {
            write!(f, " val_loss={v}")?;
        }
        Ok(())
    }
}

impl EpochRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let pairs: Vec<(String, String)> = line
            .split_whitespace()
            .filter_map(|f| f.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self {
            epoch: require(&pairs, "epoch")?,
            step: require(&pairs, "step")?,
            lr: require(&pairs, "lr")?,
            loss: require(&pairs, "loss")?,
            val_loss: lookup(&pairs, "val_loss")
                .map(|v| parse_value("val_loss", v))
                .transpose()?,
        })
    }
}

/// Files written by [`Trainer::fit`] when an output directory is given.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub last: PathBuf,
    pub best: PathBuf,
    pub report: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            last: dir.join("last.ckpt"),
            best: dir.join("best.ckpt"),
            report: dir.join("report.txt"),
        }
    }
}

/// Model, optimizer state and counters of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CaptionModel<f32>,
    pub adam: AdamState<f32>,
    pub vocab: Vocabulary,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_loss: Option<f64>,
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let model = CaptionModel::new(config.model_config(vocab.len()), &mut rng)?;
        Self::with_model(config, vocab, model)
    }

    pub fn with_model(config: TrainConfig, vocab: Vocabulary, model: CaptionModel<f32>) -> Result<Self> {
        config.validate()?;
        if model.vocab() != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "model has {} output tokens, vocabulary has {}",
                model.vocab(),
                vocab.len()
            )));
        }
        Ok(Self {
            config,
            model,
            adam: AdamState::new(),
            vocab,
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
            steps: Vec::new(),
            best_loss: None,
        })
    }

    pub fn steps_per_epoch(&self, data: &TrainingSet) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    fn epoch_order(&self, data: &TrainingSet, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, Stream::Order, epoch as u64));
        order
    }

    /// One optimizer step on the given examples.
    pub fn train_step(&mut self, data: &TrainingSet, examples: &[usize], lr: f64) -> Result<f64> {
        let (mut mel, captions) = data.batch(examples)?;
        if self.config.augment {
            let mut rng = stream_rng(self.config.seed, Stream::Augment, self.global_step);
            augment_batch(
                &mut mel,
                &mut rng,
                &self.config.augment_policy(),
                MelConfig::default().floor_value(),
            );
        }
        let mut tape = Tape::training(derive_seed(self.config.seed, Stream::Dropout, self.global_step));
        let (loss, _) = self.model.loss(&mut tape, &mel, &captions.ids, captions.max_len)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            let clips: Vec<&str> = examples
                .iter()
                .map(|&i| data.clip_ids[data.examples[i].item].as_str())
                .collect();
            log::error!("non-finite loss at step {}; batch clips {clips:?}", self.global_step);
            return Err(Error::NonFinite(format!(
                "loss {value} at epoch {} step {} (batch clips {clips:?})",
                self.epoch, self.global_step
            )));
        }
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, &mut self.model.store);
        if self.config.clip_norm > 0.0 {
            clip_grad_norm(&mut self.model.store, self.config.clip_norm);
        }
        let stepped = self.adam.step(&mut self.model.store, lr);
        self.model.store.zero_grads();
        stepped?;
        self.global_step += 1;
        Ok(value)
    }

    /// Runs the next epoch and returns its record (without validation loss).
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus("training set has no examples".into()));
        }
        let spe = self.steps_per_epoch(data);
        let order = self.epoch_order(data, self.epoch);
        let mut total = 0.0;
        let mut lr = 0.0;
        for (s, chunk) in order.chunks(self.config.batch_size).enumerate() {
            lr = self.config.lr_at(self.epoch, s, spe);
            let step = self.global_step;
            let loss = self.train_step(data, chunk, lr)?;
            self.steps.push(StepRecord {
                epoch: self.epoch,
                step,
                lr,
                loss,
            });
            total += loss;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            step: self.global_step,
            lr,
            loss: total / spe as f64,
            val_loss: None,
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Token-weighted mean loss in evaluation mode.
    pub fn evaluate_loss(&mut self, data: &TrainingSet) -> Result<f64> {
        evaluate_loss(&mut self.model, data, self.config.batch_size)
    }

    /// Trains until `config.epochs`, keeping `last.ckpt`, `best.ckpt` and a
    /// report under `out` when given. Selection uses validation loss when a
    /// validation set is supplied and training loss otherwise.
    pub fn fit(
        &mut self,
        data: &TrainingSet,
        val: Option<&TrainingSet>,
        out: Option<&Path>,
    ) -> Result<Vec<EpochRecord>> {
        let outputs = out.map(TrainOutputs::in_dir);
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
        }
        while self.epoch < self.config.epochs {
            let mut record = self.run_epoch(data)?;
            if let Some(v) = val {
                record.val_loss = Some(self.evaluate_loss(v)?);
            }
            log::info!("{record}");
            self.history.push(record);
            let score = record.val_loss.unwrap_or(record.loss);
            let improved = self.best_loss.is_none_or(|b| score < b);
            if improved {
                self.best_loss = Some(score);
            }
            if let Some(o) = &outputs {
                let ckpt = self.to_checkpoint();
                ckpt.save(&o.last)?;
                if improved {
                    ckpt.save(&o.best)?;
                }
                std::fs::write(&o.report, self.report_text())?;
            }
        }
        Ok(self.history.clone())
    }

    pub fn report_text(&self) -> String {
        self.history.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn to_checkpoint(&self) -> TensorFile {
        let mut f = TensorFile::default();
        f.push_text("meta/model", &self.model.config.to_kv());
        f.push_text("meta/train", &self.config.to_kv());
        f.push_text(
            "meta/state",
            &format!(
                "epoch = {}\nglobal_step = {}\nadam_step = {}\nbest_loss = {}\n",
                self.epoch,
                self.global_step,
                self.adam.step_count(),
                self.best_loss.map(|b| b.to_string()).unwrap_or_else(|| "none".into())
            ),
        );
        f.push_text("meta/vocab", &self.vocab.to_file_string());
        f.push_text("meta/vocab_hash", &self.vocab.hash());
        f.push_text("meta/history", &self.report_text());
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            f.push_tensor(format!("param/{}", p.name()), p.value().clone());
            if let Some((m, v)) = self.adam.moments(i) {
                f.push_tensor(format!("adam.m/{}", p.name()), m.clone());
                f.push_tensor(format!("adam.v/{}", p.name()), v.clone());
            }
        }
        f
    }

    /// Restores a run; `vocab`, when given, must match the stored one.
    pub fn from_checkpoint(file: &TensorFile, vocab: Option<&Vocabulary>) -> Result<Self> {
        let stored = Loaded::from_file(file)?;
        if let Some(v) = vocab {
            if v.hash() != stored.vocab.hash() {
                return Err(Error::VocabMismatch(
                    "checkpoint was trained with a different vocabulary".into(),
                ));
            }
        }
        let config = TrainConfig::from_kv_text(&file.text("meta/train")?)?;
        let state = parse_kv(&file.text("meta/state")?)?;
        let adam_step: u64 = require(&state, "adam_step")?;
        let moments = stored
            .model
            .store
            .iter()
            .map(|(_, p)| {
                match (
                    file.tensor(&format!("adam.m/{}", p.name())),
                    file.tensor(&format!("adam.v/{}", p.name())),
                ) {
                    (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                    _ => None,
                }
            })
            .collect();
        let history = file
            .text("meta/history")?
            .lines()
            .filter(|l| !l.is_empty())
            .map(EpochRecord::parse)
            .collect::<Result<Vec<_>>>()?;
        let best_loss = match lookup(&state, "best_loss") {
            None | Some("none") => None,
            Some(v) => Some(parse_value("best_loss", v)?),
        };
        let mut t = Self::with_model(config, stored.vocab, stored.model)?;
        t.adam = AdamState::restore(adam_step, moments);
        t.epoch = require(&state, "epoch")?;
        t.global_step = require(&state, "global_step")?;
        t.history = history;
        t.best_loss = best_loss;
        Ok(t)
    }
}

/// Token-weighted mean fused loss of `model` over `data`, in evaluation mode.
pub fn evaluate_loss(model: &mut CaptionModel<f32>, data: &TrainingSet, batch_size: usize) -> Result<f64> {
    token_weighted(model, data, batch_size, false)
}

/// Token-weighted cross-entropy of the renormalized output distribution
/// `log_softmax(P_fusion)`. Equals [`evaluate_loss`] for single-decoder modes
/// and is comparable across modes.
pub fn evaluate_normalized_loss(model: &mut CaptionModel<f32>, data: &TrainingSet, batch_size: usize) -> Result<f64> {
    token_weighted(model, data, batch_size, true)
}

fn token_weighted(
    model: &mut CaptionModel<f32>,
    data: &TrainingSet,
    batch_size: usize,
    normalize: bool,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (mel, captions) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let loss = if normalize {
            let (inputs, targets, valid) = teacher_forcing(&captions.ids, mel.batch, captions.max_len)?;
            let out = model.forward(&mut tape, &mel, &inputs, captions.max_len - 1)?;
            let logp = tape.log_softmax(out.p_fusion)?;
            tape.nll(logp, &targets, &valid)?
        } else {
            model.loss(&mut tape, &mel, &captions.ids, captions.max_len)?.0
        };
        let n: usize = captions.lengths.iter().map(|l| l - 1).sum();
        total += tape.value(loss).item() as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(total / tokens as f64)
}

/// Model and vocabulary restored from a checkpoint for inference.
pub struct Loaded {
    pub model: CaptionModel<f32>,
    pub vocab: Vocabulary,
}

impl Loaded {
    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let vocab = Vocabulary::from_file_string(&file.text("meta/vocab")?)?;
        if vocab.hash() != file.text("meta/vocab_hash")?.trim() {
            return Err(Error::VocabMismatch("stored vocabulary does not match its hash".into()));
        }
        let config = ModelConfig::from_kv(&parse_kv(&file.text("meta/model")?)?)?;
        let mut rng = stream_rng(0, Stream::Init, 0);
        let mut model = CaptionModel::<f32>::new(config, &mut rng)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = format!("param/{}", model.store.get(id).name());
            let t: &Tensor<f32> = file
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            model.store.set_value(id, t.clone())?;
        }
        Ok(Self { model, vocab })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        let spe = 7;
        assert!((c.lr_at(4, spe - 1, spe) - 5e-4).abs() < 1e-18);
        assert!(c.lr_at(0, 0, spe) < c.lr_at(0, 1, spe));
        assert_eq!(c.lr_at(5, 0, spe), 5e-4);
        assert_eq!(c.lr_at(9, 6, spe), 5e-4);
        assert!((c.lr_at(10, 0, spe) - 5e-5).abs() < 1e-18);
        assert!((c.lr_at(19, 3, spe) - 5e-5).abs() < 1e-18);
        assert!((c.lr_at(20, 0, spe) - 5e-6).abs() < 1e-18);
        assert!((c.lr_at(29, 6, spe) - 5e-6).abs() < 1e-18);

        let shifted = TrainConfig {
            decay_after_warmup: true,
            ..TrainConfig::default()
        };
        assert_eq!(shifted.lr_at(14, 0, spe), 5e-4);
        assert!((shifted.lr_at(15, 0, spe) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn scaled_schedule() {
        let c = TrainConfig::scaled_to(300);
        assert_eq!((c.warmup_epochs, c.decay_every), (50, 100));
        let tiny = TrainConfig::scaled_to(1);
        assert_eq!(tiny.warmup_epochs, 0);
        tiny.validate().unwrap();
        assert_eq!(tiny.lr_at(0, 0, 3), tiny.base_lr);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::scaled_to(12);
        c.mode = DecodeMode::FusionOnly;
        c.base_lr = 1.25e-3;
        assert_eq!(TrainConfig::from_kv_text(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::from_kv_text("speed = 3").is_err());
    }

    #[test]
    fn epoch_record_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            step: 12,
            lr: 5e-4,
            loss: 1.0 / 3.0,
            val_loss: Some(0.1),
        };
        assert_eq!(EpochRecord::parse(&r.to_string()).unwrap(), r);
    }
}
