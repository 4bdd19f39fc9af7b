use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use audiocap::audio::{load_wav, log_mel, write_wav, AudioClip, MelBatch, MelConfig};
use audiocap::eval::{beam_decode, hypothesis_text, ModelScorer};
use audiocap::model::MIN_FRAMES;
use audiocap::train::Loaded;

fn audiocap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audiocap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = audiocap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    raw: PathBuf,
    prep: PathBuf,
}

fn fixture(items: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let raw = root.join("raw");
    let prep = root.join("prep");
    ok(&[
        "generate",
        "--out",
        s(&raw),
        "--items",
        &items.to_string(),
        "--seed",
        "3",
    ]);
    ok(&[
        "prepare",
        "--csv",
        s(&raw.join("captions.csv")),
        "--audio-root",
        s(&raw),
        "--out",
        s(&prep),
    ]);
    Fixture {
        _dir: dir,
        root,
        raw,
        prep,
    }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(out);
    let mut args = vec!["train", "--data", s(&f.prep), "--out", s(&out), "--batch-size", "4"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn prepare_twice_is_byte_identical() {
    let f = fixture(4);
    let first = read_dir_sorted(&f.prep);
    ok(&[
        "prepare",
        "--csv",
        s(&f.raw.join("captions.csv")),
        "--audio-root",
        s(&f.raw),
        "--out",
        s(&f.prep),
    ]);
    assert_eq!(first, read_dir_sorted(&f.prep));
    assert!(first.iter().any(|(n, _)| n.ends_with(".lmel")));
}

#[test]
fn missing_wav_goes_to_skip_list() {
    let f = fixture(3);
    std::fs::remove_file(f.raw.join("clip_001.wav")).unwrap();
    let out = f.root.join("prep2");
    ok(&[
        "prepare",
        "--csv",
        s(&f.raw.join("captions.csv")),
        "--audio-root",
        s(&f.raw),
        "--out",
        s(&out),
    ]);
    let skipped = std::fs::read_to_string(out.join("skipped.txt")).unwrap();
    assert_eq!(skipped.lines().count(), 1);
    assert!(skipped.contains("clip_001.wav"));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
}

#[test]
fn training_writes_one_record_per_epoch_and_is_seeded() {
    let f = fixture(6);
    let a = train(&f, "a", &["--epochs", "2", "--seed", "1"]);
    let b = train(&f, "b", &["--epochs", "2", "--seed", "1"]);
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().next().unwrap().starts_with("epoch=0 step="));
    for name in ["report.txt", "last.ckpt", "vocab.txt"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let config = std::fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(config.contains("epochs = 2"));
    assert!(config.contains("seed = 1"));
}

#[test]
fn resume_continues_counters() {
    let f = fixture(6);
    let cfg = f.root.join("schedule.txt");
    std::fs::write(
        &cfg,
        "epochs = 3\nwarmup_epochs = 0\ndecay_every = 1\nbatch_size = 4\nseed = 2\n",
    )
    .unwrap();
    let full = train(&f, "full", &["--config", s(&cfg)]);
    let head = train(&f, "head", &["--config", s(&cfg), "--epochs", "1"]);
    let resumed = f.root.join("resumed");
    ok(&[
        "train",
        "--data",
        s(&f.prep),
        "--out",
        s(&resumed),
        "--resume",
        s(&head.join("last.ckpt")),
        "--epochs",
        "3",
    ]);
    let report = std::fs::read_to_string(resumed.join("report.txt")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("epoch=1 step=4"), "{report}");
    assert!(lines[2].starts_with("epoch=2 step=6"), "{report}");
    assert_eq!(report, std::fs::read_to_string(full.join("report.txt")).unwrap());
}

#[test]
fn caption_beam_one_matches_beam_search_of_width_one() {
    let f = fixture(4);
    let run = train(&f, "run", &["--epochs", "2", "--seed", "4"]);
    let ckpt = run.join("last.ckpt");
    let wav = f.raw.join("clip_002.wav");
    let cli = ok(&["caption", "--checkpoint", s(&ckpt), "--wav", s(&wav), "--beam", "1"]);

    let mut loaded = Loaded::load(&ckpt).unwrap();
    let cfg = MelConfig::default();
    let mel = log_mel(&load_wav(&wav).unwrap(), &cfg)
        .unwrap()
        .padded_to(MIN_FRAMES, cfg.floor_value());
    let memory = loaded.model.memory(&MelBatch::from_items(&[&mel]).unwrap()).unwrap();
    let mut scorer = ModelScorer {
        model: &loaded.model,
        memory,
    };
    let h = beam_decode(&mut scorer, 0, 1, 21, 0.0).unwrap();
    assert_eq!(cli.trim_end(), hypothesis_text(&h, &loaded.vocab));
}

#[test]
fn silent_clip_captions_cleanly() {
    let f = fixture(3);
    let run = train(&f, "run", &["--epochs", "1"]);
    let wav = f.root.join("silence.wav");
    write_wav(
        &wav,
        &AudioClip {
            samples: vec![0.0; 16_000],
            sample_rate: 16_000,
            source_id: "silence".into(),
        },
    )
    .unwrap();
    let out = audiocap(&["caption", "--checkpoint", s(&run.join("last.ckpt")), "--wav", s(&wav)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1);
}

#[test]
fn unreadable_wav_is_a_data_error() {
    let f = fixture(3);
    let run = train(&f, "run", &["--epochs", "1"]);
    let bad = f.root.join("bad.wav");
    std::fs::write(&bad, b"not a wav file").unwrap();
    let out = audiocap(&["caption", "--checkpoint", s(&run.join("last.ckpt")), "--wav", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rows_follow_checkpoint_count() {
    let f = fixture(4);
    let run = train(&f, "run", &["--epochs", "1"]);
    let ckpt = run.join("last.ckpt");

    let one = f.root.join("one");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.prep), "--out", s(&one)]);
    let csv = std::fs::read_to_string(one.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("model,BLEU1,BLEU2,BLEU3,BLEU4,ROUGEL,CIDEr"));

    let three = f.root.join("three");
    let args: Vec<String> = ["dual", "fusion-only", "high-only"]
        .iter()
        .map(|m| format!("{m}={}", ckpt.display()))
        .collect();
    ok(&[
        "eval",
        "--checkpoint",
        &args[0],
        "--checkpoint",
        &args[1],
        "--checkpoint",
        &args[2],
        "--data",
        s(&f.prep),
        "--out",
        s(&three),
    ]);
    let table = std::fs::read_to_string(three.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("dual,"));
    assert!(rows[2].starts_with("high-only,"));
}

#[test]
fn eval_on_empty_manifest_fails() {
    let f = fixture(3);
    let run = train(&f, "run", &["--epochs", "1"]);
    let empty = f.root.join("empty.csv");
    std::fs::write(&empty, "file_name,caption_1,caption_2,caption_3,caption_4,caption_5\n").unwrap();
    let out = audiocap(&[
        "eval",
        "--checkpoint",
        s(&run.join("last.ckpt")),
        "--csv",
        s(&empty),
        "--audio-root",
        s(&f.raw),
        "--out",
        s(&f.root.join("ev")),
    ]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable rows"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(audiocap(&["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(audiocap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(audiocap(&["--help"]).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest", "--quick"]);
    assert!(out.lines().all(|l| !l.starts_with("FAIL")), "{out}");
    assert!(out.trim_end().ends_with("0 failed"));
}
