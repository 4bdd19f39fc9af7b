//! Built-in correctness battery: gradient checks, fusion and ablation
//! identities, encoder shape contracts and metric oracles.

pub mod oracle;

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::MelBatch;
use crate::autograd::Tape;
use crate::error::Result;
use crate::eval::metrics;
use crate::gradcheck::{self, OpCase, DEFAULT_INSTANCES};
use crate::model::{fuse_logits, fused_ce_loss, pooled_len, CaptionModel, DecodeMode, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, detail)) => Check::new(name, ok, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({})", self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct SelfTestOptions {
    pub seed: u64,
    pub grad_instances: usize,
    /// Parameter coordinates probed per composite instance.
    pub composite_coords: usize,
    pub fusion_batches: usize,
    pub shape_trials: usize,
    pub metric_corpora: usize,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            grad_instances: DEFAULT_INSTANCES,
            composite_coords: 60,
            fusion_batches: 1000,
            shape_trials: 3,
            metric_corpora: 100,
        }
    }
}

/// Runs the whole battery in a fixed order.
pub fn run(opts: &SelfTestOptions) -> Vec<Check> {
    let mut checks = gradient_checks(&gradcheck::op_cases(), opts.grad_instances, opts.seed);
    checks.push(composite_check(opts.grad_instances, opts.composite_coords, opts.seed));
    checks.push(fusion_identity_check(opts.fusion_batches, opts.seed));
    checks.push(ablation_identity_check(opts.seed));
    checks.push(shape_contract_check(opts.shape_trials, opts.seed));
    checks.push(metric_oracle_check(opts.metric_corpora, opts.seed));
    checks.push(metric_anchor_check());
    checks
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// One named check per op case.
pub fn gradient_checks(cases: &[OpCase], instances: usize, seed: u64) -> Vec<Check> {
    cases
        .iter()
        .map(|case| {
            let name = format!("grad/{}", case.name);
            Check::from_result(
                &name,
                gradcheck::check_case(case, instances, seed).map(|r| {
                    (
                        r.passed(),
                        format!("{} instances, worst relative error {:.2e}", r.instances, r.worst),
                    )
                }),
            )
        })
        .collect()
}

pub fn composite_check(instances: usize, coords: usize, seed: u64) -> Check {
    let t0 = Instant::now();
    Check::from_result(
        "grad/encoder+dual-decoder",
        gradcheck::check_composite(instances, coords, seed).map(|r| {
            (
                r.passed(),
                format!(
                    "{} instances x {coords} coords, worst relative error {:.2e}, {:.1?}",
                    r.instances,
                    r.worst,
                    t0.elapsed()
                ),
            )
        }),
    )
}

/// Largest `|fused loss - (loss1 + loss2)|` over random 64-bit logit batches,
/// and whether every fused log-probability equalled the elementwise sum exactly.
pub fn fusion_identity(batches: usize, seed: u64) -> Result<(bool, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact = true;
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let (b, l, v) = (
            rng.random_range(1..=4),
            rng.random_range(1..=6),
            rng.random_range(4..=12),
        );
        let scale: f64 = rng.random_range(0.1..8.0);
        let a = Tensor::<f64>::from_fn(&[b, l, v], |_| rng.random_range(-scale..scale));
        let c = Tensor::<f64>::from_fn(&[b, l, v], |_| rng.random_range(-scale..scale));
        let targets: Vec<usize> = (0..b * l).map(|_| rng.random_range(0..v)).collect();
        let mut valid: Vec<bool> = (0..b * l).map(|_| rng.random_bool(0.8)).collect();
        valid[0] = true;

        let mut tape = Tape::new();
        let (av, cv) = (tape.constant(a), tape.constant(c));
        let (p1, p2, pf) = fuse_logits(&mut tape, av, cv)?;
        let sum_ok = tape
            .value(pf)
            .data()
            .iter()
            .zip(tape.value(p1).data().iter().zip(tape.value(p2).data()))
            .all(|(&f, (&x, &y))| f == x + y);
        exact &= sum_ok;
        let lf = fused_ce_loss(&mut tape, pf, &targets, &valid)?;
        let l1 = fused_ce_loss(&mut tape, p1, &targets, &valid)?;
        let l2 = fused_ce_loss(&mut tape, p2, &targets, &valid)?;
        let (lf, l1, l2) = (tape.value(lf).item(), tape.value(l1).item(), tape.value(l2).item());
        worst = worst.max((lf - (l1 + l2)).abs());
    }
    Ok((exact, worst))
}

pub fn fusion_identity_check(batches: usize, seed: u64) -> Check {
    Check::from_result(
        "fusion-identity",
        fusion_identity(batches, seed).map(|(exact, worst)| {
            (
                exact && worst <= 1e-6,
                format!("{batches} batches, sum exact: {exact}, worst loss gap {worst:.2e}"),
            )
        }),
    )
}

/// Small-but-real model used by the identity and shape checks.
fn small_config(vocab: usize) -> ModelConfig {
    let mut cfg = gradcheck::tiny_model_config(vocab);
    cfg.encoder.n_mels = 32;
    cfg.encoder.channels = [4, 8, 8, 16];
    cfg.encoder.hidden = 32;
    cfg.encoder.width = 16;
    cfg.decoder.width = 16;
    cfg.decoder.ffn = 32;
    cfg.decoder.layers = 2;
    cfg
}

/// Outcome of zeroing the low path and tying the decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationIdentity {
    pub fusion_equals_high: bool,
    pub dual_loss: f64,
    pub high_only_loss: f64,
}

impl AblationIdentity {
    pub fn holds(&self) -> bool {
        self.fusion_equals_high && self.dual_loss == 2.0 * self.high_only_loss
    }
}

pub fn ablation_identity(config: ModelConfig, seed: u64) -> Result<AblationIdentity> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = config.decoder.vocab;
    let n_mels = config.encoder.n_mels;
    let mut model = CaptionModel::<f32>::new(config, &mut rng)?;
    model.zero_low_projection();
    model.tie_fusion_decoder_to_high()?;
    let (mel, ids, l) = gradcheck::tiny_batch(&mut rng, n_mels, vocab);

    model.set_mode(DecodeMode::Dual);
    let mut tape = Tape::new();
    let (dual, out) = model.loss(&mut tape, &mel, &ids, l)?;
    let fusion_equals_high = tape.value(out.encoder.x_fusion) == tape.value(out.encoder.x_high);
    let dual_loss = tape.value(dual).item() as f64;

    model.set_mode(DecodeMode::HighOnly);
    let mut tape = Tape::new();
    let (high, _) = model.loss(&mut tape, &mel, &ids, l)?;
    Ok(AblationIdentity {
        fusion_equals_high,
        dual_loss,
        high_only_loss: tape.value(high).item() as f64,
    })
}

pub fn ablation_identity_check(seed: u64) -> Check {
    Check::from_result(
        "ablation-identity",
        ablation_identity(small_config(11), seed).map(|r| {
            (
                r.holds(),
                format!(
                    "x_fusion == x_high: {}, dual {:.6} vs 2 x high-only {:.6}",
                    r.fusion_equals_high,
                    r.dual_loss,
                    2.0 * r.high_only_loss
                ),
            )
        }),
    )
}

/// Encoder output shapes for one random input of `t_in` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderShapes {
    pub x3: Vec<usize>,
    pub x_final: Vec<usize>,
    pub x_high: Vec<usize>,
    pub x_fusion: Vec<usize>,
}

pub fn encoder_shapes(model: &mut CaptionModel<f32>, t_in: usize, rng: &mut impl Rng) -> Result<EncoderShapes> {
    let n_mels = model.config.encoder.n_mels;
    let mel = MelBatch {
        data: (0..t_in * n_mels).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        batch: 1,
        frames: t_in,
        n_mels,
        lengths: vec![t_in],
    };
    let mut tape = Tape::new();
    let vars = model.encode(&mut tape, &mel)?;
    Ok(EncoderShapes {
        x3: tape.shape(vars.x3).to_vec(),
        x_final: tape.shape(vars.x_final).to_vec(),
        x_high: tape.shape(vars.x_high).to_vec(),
        x_fusion: tape.shape(vars.x_fusion).to_vec(),
    })
}

/// Whether `shapes` match the contract for `t_in` under `config`.
pub fn shapes_match(config: &ModelConfig, t_in: usize, shapes: &EncoderShapes) -> bool {
    let e = &config.encoder;
    let (t3, t) = (pooled_len(t_in, 3), pooled_len(t_in, 4));
    shapes.x3 == [1, t3, e.channels[2]]
        && shapes.x_final == [1, t, e.hidden]
        && shapes.x_high == [1, t, e.width]
        && shapes.x_fusion == [1, t, e.width]
}

pub fn shape_contract_check(trials: usize, seed: u64) -> Check {
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig::new(16);
        let mut model = CaptionModel::<f32>::new(config.clone(), &mut rng)?;
        let mut lengths = vec![16usize];
        lengths.extend((1..trials).map(|_| rng.random_range(16..=160)));
        let mut bad = Vec::new();
        for &t_in in &lengths {
            let shapes = encoder_shapes(&mut model, t_in, &mut rng)?;
            if !shapes_match(&config, t_in, &shapes) {
                bad.push(format!("T_in={t_in}: {shapes:?}"));
            }
        }
        Ok((
            bad.is_empty(),
            if bad.is_empty() {
                format!("lengths {lengths:?}")
            } else {
                bad.join("; ")
            },
        ))
    };
    Check::from_result("shape-contract", run())
}

/// Random corpus over a tiny vocabulary: `(hypotheses, reference sets)`.
pub fn random_corpus(rng: &mut impl Rng) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    fn sentence(rng: &mut impl Rng, lo: usize) -> Vec<String> {
        const WORDS: [&str; 6] = ["a", "dog", "barks", "car", "passes", "loud"];
        let n = rng.random_range(lo..=9);
        (0..n)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
            .collect()
    }
    let items = rng.random_range(2..=6);
    let hyps = (0..items).map(|_| sentence(rng, 1)).collect();
    let refs = (0..items)
        .map(|_| (0..rng.random_range(1..=5)).map(|_| sentence(rng, 1)).collect())
        .collect();
    (hyps, refs)
}

/// Largest absolute difference between the metric implementations and the oracle.
pub fn metric_oracle_gap(corpora: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..corpora {
        let (h, r) = random_corpus(&mut rng);
        let fast = metrics::bleu(&h, &r, 4)?;
        for (a, b) in fast.iter().zip(oracle::bleu(&h, &r, 4)) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((metrics::rouge_l(&h, &r)? - oracle::rouge_l(&h, &r)).abs());
        worst = worst.max((metrics::cider(&h, &r)? - oracle::cider(&h, &r)).abs());
    }
    Ok(worst)
}

pub fn metric_oracle_check(corpora: usize, seed: u64) -> Check {
    Check::from_result(
        "metric-oracle",
        metric_oracle_gap(corpora, seed).map(|gap| (gap <= 1e-9, format!("{corpora} corpora, worst gap {gap:.2e}"))),
    )
}

/// `[BLEU1..4, ROUGE-L, CIDEr]` of a corpus.
pub fn metric_row(h: &[Vec<String>], r: &[Vec<Vec<String>>]) -> Result<[f64; 6]> {
    let b = metrics::bleu(h, r, 4)?;
    Ok([b[0], b[1], b[2], b[3], metrics::rouge_l(h, r)?, metrics::cider(h, r)?])
}

fn split(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Identity and disjoint anchor corpora.
pub fn anchor_corpora() -> [(Vec<Vec<String>>, Vec<Vec<Vec<String>>>); 2] {
    let sentences = [
        "a dog barks loudly in the yard",
        "rain falls on a metal roof",
        "a car passes by on the street",
    ];
    let identity_h: Vec<Vec<String>> = sentences.iter().map(|s| split(s)).collect();
    let identity_r = identity_h.iter().map(|s| vec![s.clone()]).collect();
    let disjoint_h = vec![split("one two three four"), split("five six seven eight")];
    let disjoint_r = vec![
        vec![split("alpha beta gamma delta")],
        vec![split("epsilon zeta eta theta")],
    ];
    [(identity_h, identity_r), (disjoint_h, disjoint_r)]
}

pub fn metric_anchor_check() -> Check {
    let run = || -> Result<(bool, String)> {
        let [(ih, ir), (dh, dr)] = anchor_corpora();
        let id = metric_row(&ih, &ir)?;
        let dj = metric_row(&dh, &dr)?;
        let id_ok = id[..5].iter().all(|&v| (v - 1.0).abs() < 1e-12) && (id[5] - 10.0).abs() < 1e-9;
        let dj_ok = dj.iter().all(|&v| v == 0.0);
        Ok((id_ok && dj_ok, format!("identity {id:.4?}, disjoint {dj:?}")))
    };
    Check::from_result("metric-anchors", run())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_a_few_corpora() {
        assert!(metric_oracle_gap(10, 4).unwrap() <= 1e-9);
    }

    #[test]
    fn anchors_and_fusion_hold() {
        assert!(metric_anchor_check().passed);
        assert!(fusion_identity_check(50, 1).passed);
        assert!(ablation_identity_check(1).passed);
    }
}
