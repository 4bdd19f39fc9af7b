use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use audiocap::audio::{load_wav, log_mel, MelConfig};
use audiocap::eval::{
    ablation_table, caption_clips, evaluate_model, hypothesis_text, load_ablation_models, write_report, DecodeOptions,
};
use audiocap::model::{DecodeMode, MIN_FRAMES};
use audiocap::prepare::{prepare_dataset, PreparedDataset};
use audiocap::selftest::{self, SelfTestOptions};
use audiocap::text::{generate_micro_dataset, load_clotho_csv, SynthConfig, Vocabulary};
use audiocap::train::{tokenize_all, Loaded, TensorFile, TrainConfig, Trainer, TrainingSet};

/// A command-line mistake; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(
    name = "audiocap",
    version,
    about = "Audio captioning with dual transformer decoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of tone/noise clips with captions.
    Generate(GenerateArgs),
    /// Build the vocabulary, spectrogram cache and manifest.
    Prepare(PrepareArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Caption one WAV file.
    Caption(CaptionArgs),
    /// Score one checkpoint, or several as an ablation table.
    Eval(EvalArgs),
    /// Run the built-in correctness battery.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub items: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub audio_root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

/// Either a prepared directory or a caption table with its audio.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory written by `prepare`.
    #[arg(long, conflicts_with_all = ["csv", "audio_root"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "audio_root")]
    pub csv: Option<PathBuf>,
    #[arg(long, requires = "csv")]
    pub audio_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Prepared validation directory used for checkpoint selection.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// dual, fusion-only or high-only.
    #[arg(long)]
    pub mode: Option<DecodeMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// key = value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `path` or `mode=path`; repeat for an ablation table.
    #[arg(long, required = true)]
    pub checkpoint: Vec<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Fewer instances per check.
    #[arg(long)]
    pub quick: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Caption(a) => caption(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn echo_config(out: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.txt"), text)?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(audiocap::Error::MissingFile(path.to_path_buf())).with_context(|| format!("{what} not found"));
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ds = generate_micro_dataset(&a.out, a.seed, a.items, &SynthConfig::default())?;
    println!("{} clips written to {}", ds.manifest.len(), a.out.display());
    println!("captions: {}", ds.csv_path.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    require_file(&a.csv, "caption table")?;
    require_file(&a.audio_root, "audio root")?;
    echo_config(
        &a.out,
        &format!(
            "csv = {}\naudio_root = {}\nmin_count = {}\n",
            a.csv.display(),
            a.audio_root.display(),
            a.min_count
        ),
    )?;
    let s = prepare_dataset(&a.csv, &a.audio_root, &a.out, &MelConfig::default(), a.min_count)?;
    println!(
        "{} clips, vocabulary {} tokens, {} rows skipped, {} empty captions",
        s.items,
        s.vocab_size,
        s.skipped.missing_audio.len(),
        s.skipped.empty_captions.len()
    );
    Ok(())
}

/// Loaded training data and the vocabulary stored with it (if prepared).
struct Source {
    vocab: Vocabulary,
    data: Option<PreparedDataset>,
    raw: Option<audiocap::text::DatasetManifest>,
}

impl Source {
    fn open(args: &DataArgs, min_count: usize) -> Result<Self> {
        match (&args.data, &args.csv, &args.audio_root) {
            (Some(dir), _, _) => {
                let p =
                    PreparedDataset::open(dir).with_context(|| format!("opening prepared data {}", dir.display()))?;
                Ok(Self {
                    vocab: p.vocab.clone(),
                    data: Some(p),
                    raw: None,
                })
            }
            (None, Some(csv), Some(root)) => {
                require_file(csv, "caption table")?;
                let (manifest, skipped) = load_clotho_csv(csv, root)?;
                if !skipped.missing_audio.is_empty() {
                    log::warn!("{} rows skipped for missing audio", skipped.missing_audio.len());
                }
                if manifest.is_empty() {
                    return Err(audiocap::Error::EmptyCorpus(format!("{} has no usable rows", csv.display())).into());
                }
                let vocab = Vocabulary::build(&tokenize_all(&manifest)?, min_count)?;
                Ok(Self {
                    vocab,
                    data: None,
                    raw: Some(manifest),
                })
            }
            _ => usage("give either --data or both --csv and --audio-root"),
        }
    }

    fn training_set(&self, vocab: &Vocabulary, max_len: usize) -> Result<TrainingSet> {
        Ok(match (&self.data, &self.raw) {
            (Some(p), _) => p.training_set(vocab, max_len)?,
            (None, Some(m)) => TrainingSet::from_manifest(m, vocab, &MelConfig::default(), max_len)?,
            (None, None) => unreachable!("source always holds data"),
        })
    }

    fn describe(&self) -> String {
        match (&self.data, &self.raw) {
            (Some(p), _) => format!("data = {}\n", p.dir.display()),
            (None, Some(m)) => format!("audio_root = {}\n", m.audio_root.display()),
            (None, None) => String::new(),
        }
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            require_file(path, "config file")?;
            TrainConfig::from_kv_text(&std::fs::read_to_string(path)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        if a.config.is_none() {
            let scaled = TrainConfig::scaled_to(e);
            cfg.warmup_epochs = scaled.warmup_epochs;
            cfg.decay_every = scaled.decay_every;
        }
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            require_file(path, "resume checkpoint")?;
            let file = TensorFile::load(path)?;
            let mut t = Trainer::from_checkpoint(&file, None)?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            if a.mode.is_some() || a.batch_size.is_some() || a.lr.is_some() || a.seed.is_some() || a.config.is_some() {
                log::warn!("resuming keeps the stored training config; only --epochs is applied");
            }
            t
        }
        None => {
            let cfg = train_config(&a)?;
            let source = Source::open(&a.data, cfg.min_count)?;
            Trainer::new(cfg, source.vocab.clone())?
        }
    };
    let source = Source::open(&a.data, trainer.config.min_count)?;
    if source.data.is_some() && source.vocab.hash() != trainer.vocab.hash() {
        return Err(audiocap::Error::VocabMismatch("prepared data and checkpoint vocabularies differ".into()).into());
    }
    let max_len = trainer.config.max_len;
    let data = source.training_set(&trainer.vocab, max_len)?;
    let val = match &a.val_data {
        Some(dir) => Some(PreparedDataset::open(dir)?.training_set(&trainer.vocab, max_len)?),
        None => None,
    };
    let mut echo = trainer.config.to_kv();
    echo.push_str(&source.describe());
    if let Some(v) = &a.val_data {
        echo.push_str(&format!("val_data = {}\n", v.display()));
    }
    if let Some(r) = &a.resume {
        echo.push_str(&format!("resume = {}\n", r.display()));
    }
    echo_config(&a.out, &echo)?;
    trainer.vocab.save(&a.out.join("vocab.txt"))?;
    log::info!(
        "training {} on {} pairs from {} clips, epochs {}..{}",
        trainer.config.mode,
        data.len(),
        data.clips(),
        trainer.epoch,
        trainer.config.epochs
    );
    let history = trainer.fit(&data, val.as_ref(), Some(&a.out))?;
    if let Some(last) = history.last() {
        println!("{last}");
    }
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let mut loaded = Loaded::load(&a.checkpoint)?;
    let clip = load_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    let mel_cfg = MelConfig::default();
    let mel = log_mel(&clip, &mel_cfg)?.padded_to(MIN_FRAMES, mel_cfg.floor_value());
    let opts = DecodeOptions {
        beam: a.beam.max(1),
        ..DecodeOptions::default()
    };
    let hyps = caption_clips(&mut loaded.model, std::slice::from_ref(&mel), &opts)?;
    println!("{}", hypothesis_text(&hyps[0], &loaded.vocab));
    Ok(())
}

fn parse_checkpoint_arg(arg: &str) -> Result<(Option<DecodeMode>, PathBuf)> {
    if let Some((mode, path)) = arg.split_once('=') {
        if let Ok(m) = mode.parse::<DecodeMode>() {
            return Ok((Some(m), PathBuf::from(path)));
        }
    }
    Ok((None, PathBuf::from(arg)))
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut checkpoints = Vec::new();
    for arg in &a.checkpoint {
        let (mode, path) = parse_checkpoint_arg(arg)?;
        let mode = match mode {
            Some(m) => m,
            None if path.is_file() => Loaded::load(&path)?.model.mode(),
            None => DecodeMode::Dual,
        };
        checkpoints.push((mode, Some(path)));
    }
    let (vocab, models) = load_ablation_models(&checkpoints)?;
    let source = Source::open(&a.data, 1)?;
    let data = source.training_set(&vocab, audiocap::text::DEFAULT_MAX_LEN)?;
    if data.clips() == 0 {
        return Err(audiocap::Error::EmptyCorpus("test manifest has no clips".into()).into());
    }
    let opts = DecodeOptions {
        beam: a.beam.max(1),
        ..DecodeOptions::default()
    };
    let mut echo = format!("beam = {}\n", opts.beam);
    for arg in &a.checkpoint {
        echo.push_str(&format!("checkpoint = {arg}\n"));
    }
    echo.push_str(&source.describe());
    echo_config(&a.out, &echo)?;
    if models.len() == 1 {
        let (mode, mut l) = models.into_iter().next().expect("one model");
        let report = evaluate_model(&mut l.model, &vocab, &data, &opts)?;
        write_report(&a.out, mode.as_str(), &report)?;
        print!(
            "{}\n{}\n",
            audiocap::eval::MetricReport::csv_header(),
            report.csv_row(mode.as_str())
        );
    } else {
        let table = ablation_table(models, &vocab, &data, &opts)?;
        std::fs::write(a.out.join("ablation.csv"), table.to_csv())?;
        std::fs::write(a.out.join("ablation.txt"), table.to_text())?;
        print!("{}", table.to_text());
    }
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> Result<()> {
    let mut opts = SelfTestOptions {
        seed: a.seed,
        ..SelfTestOptions::default()
    };
    if a.quick {
        opts.grad_instances = 3;
        opts.composite_coords = 20;
        opts.fusion_batches = 100;
        opts.shape_trials = 1;
        opts.metric_corpora = 10;
    }
    let checks = selftest::run(&opts);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(audiocap::Error::NonFinite(format!("{failed} self-test checks failed")).into());
    }
    Ok(())
}
