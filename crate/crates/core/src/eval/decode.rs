//! Greedy and beam search over fused next-token scores.

use crate::error::{Error, Result};
use crate::model::{CaptionModel, Memory};
use crate::text::{EOS, PAD, SOS};

/// Source of next-token log-scores for equal-length prefixes.
pub trait StepScorer {
    /// `prefixes[i]` (starting with `<sos>`) belongs to clip `items[i]`.
    fn score(&mut self, items: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores with a model's fused distribution over precomputed memories.
pub struct ModelScorer<'a> {
    pub model: &'a CaptionModel<f32>,
    pub memory: Memory<f32>,
}

impl StepScorer for ModelScorer<'_> {
    fn score(&mut self, items: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.next_token_scores(&self.memory, items, prefixes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without `<sos>`/`<eos>`.
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' fused scores, `<eos>` included.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    fn prefix(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.tokens.len() + 1);
        p.push(SOS);
        p.extend_from_slice(&self.tokens);
        p
    }

    /// `score / steps^alpha`.
    pub fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            self.score / (self.steps().max(1) as f64).powf(alpha)
        }
    }
}

fn selectable(token: usize) -> bool {
    token != PAD && token != SOS
}

/// Highest-scoring selectable token; ties go to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (w, &v) in row.iter().enumerate() {
        if selectable(w) && v > best_v {
            best = w;
            best_v = v;
        }
    }
    best
}

/// Greedy decoding for every clip in `items`, at most `max_steps` tokens each
/// (counting `<eos>`).
pub fn greedy_decode(scorer: &mut dyn StepScorer, items: &[usize], max_steps: usize) -> Result<Vec<Hypothesis>> {
    let mut hyps: Vec<Hypothesis> = items
        .iter()
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        })
        .collect();
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..hyps.len()).filter(|&i| !hyps[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let clips: Vec<usize> = active.iter().map(|&i| items[i]).collect();
        let prefixes: Vec<Vec<usize>> = active.iter().map(|&i| hyps[i].prefix()).collect();
        let rows = scorer.score(&clips, &prefixes)?;
        for (&i, row) in active.iter().zip(&rows) {
            let w = argmax(row);
            let h = &mut hyps[i];
            h.score += row[w];
            if w == EOS {
                h.finished = true;
            } else {
                h.tokens.push(w);
            }
        }
    }
    Ok(hyps)
}

/// Beam search for one clip. Candidates are ranked by raw cumulative score;
/// the returned hypothesis maximizes `score / steps^alpha`.
pub fn beam_decode(
    scorer: &mut dyn StepScorer,
    item: usize,
    beam_size: usize,
    max_steps: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..beams.len()).filter(|&b| !beams[b].finished).collect();
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = active.iter().map(|&b| beams[b].prefix()).collect();
        let rows = scorer.score(&vec![item; active.len()], &prefixes)?;
        // (score, beam rank, token); finished beams carry over with token None
        let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
        for (b, h) in beams.iter().enumerate() {
            if h.finished {
                cands.push((h.score, b, None));
            }
        }
        for (&b, row) in active.iter().zip(&rows) {
            for (w, &v) in row.iter().enumerate() {
                if selectable(w) {
                    cands.push((beams[b].score + v, b, Some(w)));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then(x.1.cmp(&y.1))
                .then(x.2.unwrap_or(0).cmp(&y.2.unwrap_or(0)))
        });
        cands.truncate(beam_size);
        beams = cands
            .into_iter()
            .map(|(score, b, w)| {
                let mut h = beams[b].clone();
                h.score = score;
                match w {
                    Some(EOS) => h.finished = true,
                    Some(w) => h.tokens.push(w),
                    None => {}
                }
                h
            })
            .collect();
    }
    let mut best = 0;
    for (i, h) in beams.iter().enumerate() {
        if h.normalized(alpha) > beams[best].normalized(alpha) {
            best = i;
        }
    }
    Ok(beams.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores from a fixed table keyed by prefix length and last token.
    struct Table {
        vocab: usize,
        rows: Box<dyn Fn(&[usize]) -> Vec<f64>>,
    }

    impl StepScorer for Table {
        fn score(&mut self, _: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let r = (self.rows)(p);
                    assert_eq!(r.len(), self.vocab);
                    r
                })
                .collect())
        }
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    /// Greedy picks token 4 (0.5) but 5 (0.4) leads to a near-certain second step.
    fn trap() -> Table {
        Table {
            vocab: 6,
            rows: Box::new(|p: &[usize]| match (p.len(), p.last()) {
                (1, _) => ln(&[1e-9, 1e-9, 0.1, 1e-9, 0.5, 0.4]),
                (2, Some(4)) => ln(&[1e-9, 1e-9, 0.34, 1e-9, 0.33, 0.33]),
                (2, Some(5)) => ln(&[1e-9, 1e-9, 0.98, 1e-9, 0.01, 0.01]),
                _ => ln(&[1e-9, 1e-9, 1.0, 1e-9, 1e-9, 1e-9]),
            }),
        }
    }

    #[test]
    fn beam_escapes_greedy_trap() {
        let g = greedy_decode(&mut trap(), &[0], 2).unwrap().remove(0);
        assert_eq!(g.tokens, vec![4]);
        let b = beam_decode(&mut trap(), 0, 2, 2, 0.0).unwrap();
        assert_eq!(b.tokens, vec![5]);
        assert!(b.score > g.score);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let g = greedy_decode(&mut trap(), &[0], 5).unwrap().remove(0);
        let b = beam_decode(&mut trap(), 0, 1, 5, 0.0).unwrap();
        assert_eq!(g, b);
    }

    #[test]
    fn single_step_budget() {
        let g = greedy_decode(&mut trap(), &[0], 1).unwrap().remove(0);
        assert!(g.tokens.len() <= 1);
        let all = beam_decode(&mut trap(), 0, 6, 1, 0.0).unwrap();
        assert_eq!(all.tokens, vec![4]);
    }
}
