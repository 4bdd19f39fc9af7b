//! Corpus BLEU, ROUGE-L and CIDEr-D over tokenized captions.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

pub type Tokens = [String];

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

fn ngram_counts(tokens: &Tokens, n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyCorpus("an item has no references".into()));
    }
    Ok(())
}

/// Corpus BLEU-1..=`max_n`: clipped n-gram precisions summed over the corpus,
/// geometric mean, and a brevity penalty against the closest reference length
/// (shorter wins ties). An order without any matches gives 0.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hc {
                total[n - 1] += c;
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        scores.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(scores)
}

pub fn lcs_len(a: &Tokens, b: &Tokens) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Best LCS F-measure of `hyp` against any reference.
pub fn rouge_l_item(hyp: &Tokens, refs: &[Vec<String>]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let l = lcs_len(hyp, r) as f64;
            if l == 0.0 || r.is_empty() {
                return 0.0;
            }
            let (p, rec) = (l / hyp.len() as f64, l / r.len() as f64);
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Corpus mean of [`rouge_l_item`].
pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(rouge_l_items(hyps, refs).iter().sum::<f64>() / hyps.len() as f64)
}

pub fn rouge_l_items(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    hyps.iter().zip(refs).map(|(h, r)| rouge_l_item(h, r)).collect()
}

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn vectorize<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let v: HashMap<&[String], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, c as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

/// CIDEr-D per item: TF-IDF cosine per order with clipping and a Gaussian
/// length penalty, averaged over orders and references, times 10. IDF uses
/// document frequencies over the reference sets of the whole corpus.
pub fn cider_items(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check_corpus(hyps, refs)?;
    if hyps.len() < 2 {
        return Err(Error::EmptyCorpus(
            "CIDEr needs at least two items for document frequencies".into(),
        ));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for rs in refs {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in rs {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (hyps.len() as f64).ln();
    let mut out = Vec::with_capacity(hyps.len());
    for (h, rs) in hyps.iter().zip(refs) {
        let hv = vectorize(h, &df, log_n);
        let mut total = 0.0;
        for r in rs {
            let rv = vectorize(r, &df, log_n);
            let delta = hv.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..CIDER_MAX_N {
                let mut dot = 0.0;
                for (g, &x) in &hv.vecs[n] {
                    if let Some(&y) = rv.vecs[n].get(g) {
                        dot += x.min(y) * y;
                    }
                }
                if hv.norms[n] != 0.0 && rv.norms[n] != 0.0 {
                    dot /= hv.norms[n] * rv.norms[n];
                }
                total += dot * penalty;
            }
        }
        out.push(total / CIDER_MAX_N as f64 / rs.len() as f64 * 10.0);
    }
    Ok(out)
}

pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    let items = cider_items(hyps, refs)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_brevity_example() {
        let b = bleu(&[s("the cat sat")], &[vec![s("the cat sat down")]], 4).unwrap();
        assert!((b[0] - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!((b[0] - 0.7165).abs() < 1e-4);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn rouge_example() {
        let r = rouge_l(&[s("a b c")], &[vec![s("a x c")]]).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l_item(&[], &[s("a")]), 0.0);
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let hyps = vec![s("a dog barks loudly outside"), s("rain falls on the roof")];
        let refs: Vec<Vec<Vec<String>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        for v in cider_items(&hyps, &refs).unwrap() {
            assert!((v - 10.0).abs() < 1e-9);
        }
        let other = vec![s("x y z w"), s("q r s t")];
        assert_eq!(cider(&other, &refs).unwrap(), 0.0);
        assert!(cider(&hyps[..1], &refs[..1]).is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bleu(&[], &[], 4).is_err());
    }
}
