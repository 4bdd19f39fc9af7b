//! Time/frequency masking of log-mel spectrograms.

use rand::Rng;

use super::{MelBatch, MelSpectrogram};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
    /// Probability that a batch uses donor (mixture) masking instead of a constant fill.
    pub mixture_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            time_masks: 2,
            max_time_width: 64,
            freq_masks: 2,
            max_freq_width: 8,
            mixture_probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            time_masks: 0,
            max_time_width: 0,
            freq_masks: 0,
            max_freq_width: 0,
            mixture_probability: 0.0,
        }
    }

    /// Upper bound on masked cells for a `frames x bins` spectrogram.
    pub fn max_masked_cells(&self, frames: usize, bins: usize) -> usize {
        self.time_masks * self.max_time_width.min(frames) * bins
            + self.freq_masks * self.max_freq_width.min(bins) * frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Frequency,
}

/// One masked band: `start..start + width` along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpan {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

impl MaskSpan {
    pub fn covers(&self, frame: usize, bin: usize) -> bool {
        let i = match self.axis {
            MaskAxis::Time => frame,
            MaskAxis::Frequency => bin,
        };
        i >= self.start && i < self.start + self.width
    }
}

/// What masked cells are overwritten with.
#[derive(Debug, Clone, Copy)]
pub enum MaskFill<'a> {
    /// Constant value (the log floor for zero-value masking).
    Value(f32),
    /// The same cells of another spectrogram; cells it lacks get `fallback`.
    Donor { donor: &'a MelSpectrogram, fallback: f32 },
}

fn draw_spans(rng: &mut impl Rng, axis: MaskAxis, count: usize, max_width: usize, extent: usize) -> Vec<MaskSpan> {
    (0..count)
        .map(|_| {
            let width = rng.random_range(0..=max_width).min(extent);
            let start = rng.random_range(0..=extent - width);
            MaskSpan { axis, start, width }
        })
        .collect()
}

fn draw_all(rng: &mut impl Rng, policy: &AugmentPolicy, frames: usize, bins: usize) -> Vec<MaskSpan> {
    let mut spans = draw_spans(rng, MaskAxis::Time, policy.time_masks, policy.max_time_width, frames);
    spans.extend(draw_spans(
        rng,
        MaskAxis::Frequency,
        policy.freq_masks,
        policy.max_freq_width,
        bins,
    ));
    spans
}

fn apply(data: &mut [f32], frames: usize, bins: usize, spans: &[MaskSpan], fill: MaskFill<'_>) {
    for t in 0..frames {
        for m in 0..bins {
            if spans.iter().any(|s| s.covers(t, m)) {
                data[t * bins + m] = match fill {
                    MaskFill::Value(v) => v,
                    MaskFill::Donor { donor, fallback } => {
                        if t < donor.frames && m < donor.n_mels {
                            donor.get(t, m)
                        } else {
                            fallback
                        }
                    }
                };
            }
        }
    }
}

/// Applies randomly drawn time and frequency masks to a copy of `mel`.
///
/// Widths are drawn from `0..=max` and clipped to the spectrogram extent.
/// Returns the masked copy and the spans that were applied; cells outside
/// every span are left bit-identical.
pub fn spec_augment(
    mel: &MelSpectrogram,
    rng: &mut impl Rng,
    policy: &AugmentPolicy,
    fill: MaskFill<'_>,
) -> (MelSpectrogram, Vec<MaskSpan>) {
    let spans = draw_all(rng, policy, mel.frames, mel.n_mels);
    let mut out = mel.clone();
    apply(&mut out.data, mel.frames, mel.n_mels, &spans, fill);
    (out, spans)
}

/// Augments a padded batch in place. Each batch picks one variant: with
/// probability `mixture_probability` every item borrows masked cells from
/// its neighbour (item `i` from item `i + 1`, cyclically), otherwise masked
/// cells take `floor`.
pub fn augment_batch(
    batch: &mut MelBatch,
    rng: &mut impl Rng,
    policy: &AugmentPolicy,
    floor: f32,
) -> Vec<Vec<MaskSpan>> {
    let mixture = batch.batch > 1 && rng.random::<f64>() < policy.mixture_probability;
    let original = batch.clone();
    let (frames, bins) = (batch.frames, batch.n_mels);
    (0..batch.batch)
        .map(|i| {
            let spans = draw_all(rng, policy, batch.lengths[i], bins);
            let donor_idx = (i + 1) % batch.batch;
            let donor = original.item(donor_idx);
            let item = batch.item_mut(i);
            for t in 0..frames {
                for m in 0..bins {
                    if spans.iter().any(|s| s.covers(t, m)) {
                        item[t * bins + m] = if mixture { donor[t * bins + m] } else { floor };
                    }
                }
            }
            spans
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mel(frames: usize) -> MelSpectrogram {
        MelSpectrogram {
            frames,
            n_mels: 16,
            data: (0..frames * 16).map(|i| (i as f32 * 0.37).sin()).collect(),
            frame_rate: 31.25,
            source_id: "m".into(),
        }
    }

    #[test]
    fn zero_width_policy_is_identity() {
        let m = mel(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, _) = spec_augment(&m, &mut rng, &AugmentPolicy::identity(), MaskFill::Value(-23.0));
        assert_eq!(out, m);
    }

    #[test]
    fn fixed_time_mask_contract() {
        let m = mel(40);
        let spans = [MaskSpan {
            axis: MaskAxis::Time,
            start: 10,
            width: 10,
        }];
        let mut out = m.clone();
        apply(&mut out.data, 40, 16, &spans, MaskFill::Value(-23.0));
        for t in 0..40 {
            let masked = (10..20).contains(&t);
            for b in 0..16 {
                if masked {
                    assert_eq!(out.get(t, b), -23.0);
                } else {
                    assert_eq!(out.get(t, b).to_bits(), m.get(t, b).to_bits());
                }
            }
        }
    }

    #[test]
    fn self_mixture_is_identity() {
        let m = mel(40);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fill = MaskFill::Donor {
            donor: &m,
            fallback: -23.0,
        };
        let (out, spans) = spec_augment(&m, &mut rng, &AugmentPolicy::default(), fill);
        assert!(!spans.is_empty());
        assert_eq!(out, m);
    }

    #[test]
    fn oversized_widths_are_clipped() {
        let m = mel(5);
        let policy = AugmentPolicy {
            max_time_width: 500,
            max_freq_width: 500,
            ..AugmentPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (_, spans) = spec_augment(&m, &mut rng, &policy, MaskFill::Value(0.0));
            for s in spans {
                let extent = if s.axis == MaskAxis::Time { 5 } else { 16 };
                assert!(s.start + s.width <= extent);
            }
        }
    }

    #[test]
    fn batch_mixture_uses_neighbour() {
        let a = mel(20);
        let mut b = mel(20);
        b.data.iter_mut().for_each(|v| *v += 100.0);
        let mut batch = MelBatch::from_items(&[&a, &b]).unwrap();
        let policy = AugmentPolicy {
            mixture_probability: 1.0,
            ..AugmentPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spans = augment_batch(&mut batch, &mut rng, &policy, -23.0);
        for t in 0..20 {
            for m in 0..16 {
                let v = batch.item(0)[t * 16 + m];
                if spans[0].iter().any(|s| s.covers(t, m)) {
                    assert_eq!(v, b.get(t, m));
                } else {
                    assert_eq!(v, a.get(t, m));
                }
            }
        }
    }
}
