//! Slow, literal reimplementations of the caption metrics used to cross-check
//! [`crate::eval::metrics`].

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Vec<f64> {
    let mut c = 0usize;
    let mut r = 0usize;
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        let mut lens: Vec<usize> = rs.iter().map(|x| x.len()).collect();
        lens.sort();
        let mut best = lens[0];
        for &l in &lens {
            if (l as i64 - h.len() as i64).abs() < (best as i64 - h.len() as i64).abs() {
                best = l;
            }
        }
        r += best;
    }
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut num, mut den) = (0usize, 0usize);
        for (h, rs) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            den += hg.len();
            for g in distinct(&hg) {
                let cap = rs.iter().map(|x| occurrences(&grams(x, n), &g)).max().unwrap_or(0);
                num += occurrences(&hg, &g).min(cap);
            }
        }
        precisions.push(if den == 0 { 0.0 } else { num as f64 / den as f64 });
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    (1..=max_n)
        .map(|n| {
            let p = &precisions[..n];
            if p.contains(&0.0) {
                0.0
            } else {
                bp * p.iter().product::<f64>().powf(1.0 / n as f64)
            }
        })
        .collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let beta: f64 = 1.2;
    let mut total = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut best = 0.0f64;
        for r in rs {
            let l = lcs(h, r) as f64;
            if l > 0.0 {
                let p = l / h.len() as f64;
                let rec = l / r.len() as f64;
                let f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
                if f > best {
                    best = f;
                }
            }
        }
        total += best;
    }
    total / hyps.len() as f64
}

fn tfidf(tokens: &[String], n: usize, refs: &[Vec<Vec<String>>]) -> Vec<(Vec<String>, f64)> {
    let all = grams(tokens, n);
    let docs = refs.len() as f64;
    distinct(&all)
        .into_iter()
        .map(|g| {
            let df = refs
                .iter()
                .filter(|rs| rs.iter().any(|r| occurrences(&grams(r, n), &g) > 0))
                .count();
            let tf = occurrences(&all, &g) as f64;
            let w = tf * (docs.ln() - (df.max(1) as f64).ln());
            (g, w)
        })
        .collect()
}

pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let sigma = 6.0f64;
    let mut sum = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut item = 0.0;
        for n in 1..=4 {
            let hv = tfidf(h, n, refs);
            for r in rs {
                let rv = tfidf(r, n, refs);
                let mut dot = 0.0;
                for (g, x) in &hv {
                    for (q, y) in &rv {
                        if g == q {
                            dot += x.min(*y) * y;
                        }
                    }
                }
                let nh = hv.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
                let nr = rv.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
                let cos = if nh > 0.0 && nr > 0.0 { dot / (nh * nr) } else { dot };
                let d = h.len() as f64 - r.len() as f64;
                item += cos * (-d * d / (2.0 * sigma * sigma)).exp() / rs.len() as f64;
            }
        }
        sum += item / 4.0 * 10.0;
    }
    sum / hyps.len() as f64
}
