use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use audiocap::audio::{log_mel, AudioClip, MelBatch, MelConfig};
use audiocap::autograd::Tape;
use audiocap::eval::{caption_clips, DecodeOptions};
use audiocap::model::{CaptionModel, ModelConfig};
use audiocap::tensor::Tensor;
use audiocap::text::{PAD, RESERVED, SOS};

const VOCAB: usize = 4_000;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[256, 512]);
    let b = random(&mut rng, &[512, 256]);
    c.bench_function("matmul 256x512x256 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(a.clone(), true);
            let y = tape.leaf(b.clone(), true);
            let z = tape.matmul(x, y, false).unwrap();
            let s = tape.sum(z);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(&mut rng, &[4, 64, 128, 32]);
    let kernel = random(&mut rng, &[64, 64, 3, 3]);
    let bias = random(&mut rng, &[64]);
    c.bench_function("conv2d 3x3 64->64 on 128x32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(input.clone(), true);
            let k = tape.leaf(kernel.clone(), true);
            let b = tape.leaf(bias.clone(), true);
            let y = tape.conv2d(x, k, b).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn features(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = AudioClip {
        samples: (0..16_000 * 10).map(|_| rng.random_range(-0.5..0.5)).collect(),
        sample_rate: 16_000,
        source_id: "noise".into(),
    };
    let cfg = MelConfig::default();
    c.bench_function("log-mel 10 s clip", |bench| {
        bench.iter(|| black_box(log_mel(&clip, &cfg).unwrap()))
    });
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::new(VOCAB);
    let n_mels = cfg.encoder.n_mels;
    let mut model = CaptionModel::<f32>::new(cfg, &mut rng).unwrap();
    let (batch, frames, l) = (2, 256, 12);
    let mel = MelBatch {
        data: (0..batch * frames * n_mels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        batch,
        frames,
        n_mels,
        lengths: vec![frames; batch],
    };
    let mut ids = vec![PAD; batch * l];
    for row in ids.chunks_mut(l) {
        row[0] = SOS;
        for id in row[1..].iter_mut() {
            *id = rng.random_range(RESERVED.len()..VOCAB);
        }
    }
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("training loss fwd+bwd, 2 clips x 256 frames", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::training(9);
            let (loss, _) = model.loss(&mut tape, &mel, &ids, l).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    let spectrogram = audiocap::audio::MelSpectrogram {
        frames,
        n_mels,
        data: mel.item(0).to_vec(),
        frame_rate: 100.0,
        source_id: "bench".into(),
    };
    let opts = DecodeOptions::default();
    group.bench_function("greedy decode, 1 clip x 256 frames", |bench| {
        bench.iter(|| black_box(caption_clips(&mut model, std::slice::from_ref(&spectrogram), &opts).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, conv, features, model);
criterion_main!(benches);
