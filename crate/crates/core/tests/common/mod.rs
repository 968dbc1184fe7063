//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use numcore::Rng;

/// Normalize → nearest-rank percentile → strict threshold → D^-1/2(A+I)D^-1/2,
/// written index by index. Returns `(M', Ã)` flattened.
pub fn graph_brute(labels: &[Vec<u8>], n: usize, phi: f64) -> (Vec<f64>, Vec<f64>) {
    let mut m = vec![vec![0f64; n]; n];
    for row in labels {
        for i in 0..n {
            for j in 0..n {
                m[i][j] += (row[i] * row[j]) as f64;
            }
        }
    }
    let mut mp = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = (m[i][i] * m[j][j]).sqrt();
            mp[i * n + j] = if d > 0.0 { m[i][j] / d } else { 0.0 };
        }
    }
    let mut upper = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            upper.push(mp[i * n + j]);
        }
    }
    upper.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((phi / 100.0 * upper.len() as f64).ceil() as usize).max(1);
    let t = upper[k - 1];
    let mut a = vec![0f64; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in 0..n {
            if i != j && mp[i * n + j] > t {
                a[i * n + j] = 1.0;
            }
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    let out = (0..n * n).map(|k| a[k] / (deg[k / n] * deg[k % n]).sqrt()).collect();
    (mp, out)
}

pub fn random_labels(rng: &mut Rng, rows: usize, n: usize, p: f64) -> Vec<Vec<u8>> {
    (0..rows).map(|_| (0..n).map(|_| (rng.uniform() < p) as u8).collect()).collect()
}

pub fn bce(z: f64, y: u8) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// F1 of column `d` of a row-major `[rows, k]` block at threshold `tau`.
pub fn f1_at(probs: &[f64], labels: &[u8], k: usize, d: usize, tau: f64) -> f64 {
    let rows = probs.len() / k;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let (pr, y) = (probs[r * k + d] >= tau, labels[r * k + d] == 1);
        tp += (pr && y) as u8 as f64;
        fp += (pr && !y) as u8 as f64;
        fn_ += (!pr && y) as u8 as f64;
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn prf(tp: f64, np: f64, nt: f64) -> (f64, f64, f64) {
    let p = if np > 0.0 { tp / np } else { 0.0 };
    let r = if nt > 0.0 { tp / nt } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Micro `(P, R, F1)` over every cell.
pub fn micro_brute(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> (f64, f64, f64) {
    let (mut tp, mut np, mut nt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            tp += (a == 1 && b == 1) as u8 as f64;
            np += a as f64;
            nt += b as f64;
        }
    }
    prf(tp, np, nt)
}

/// Sample-averaged `(P, R, F1)`; an empty row against an empty row scores 1.
pub fn sample_brute(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> (f64, f64, f64) {
    let mut acc = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let tp = p.iter().zip(t).filter(|(&a, &b)| a == 1 && b == 1).count() as f64;
        let np = p.iter().filter(|&&a| a == 1).count() as f64;
        let nt = t.iter().filter(|&&b| b == 1).count() as f64;
        let s = if np == 0.0 && nt == 0.0 { (1.0, 1.0, 1.0) } else { prf(tp, np, nt) };
        acc = (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2);
    }
    let n = pred.len() as f64;
    (acc.0 / n, acc.1 / n, acc.2 / n)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
pub fn auc_brute(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

fn count_occurrences(hay: &[String], g: &[String]) -> usize {
    if hay.len() < g.len() {
        return 0;
    }
    (0..=hay.len() - g.len()).filter(|&i| &hay[i..i + g.len()] == g).count()
}

/// Corpus BLEU-1..max_n by direct n-gram scanning.
pub fn bleu_brute(cands: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Vec<f64> {
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut m, mut tot) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for i in 0..=c.len() - n {
                let g = &c[i..i + n];
                tot += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                m += count_occurrences(c, g).min(count_occurrences(r, g));
            }
        }
        precisions.push(if tot == 0 { 0.0 } else { m as f64 / tot as f64 });
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    (1..=max_n)
        .map(|n| {
            let ps = &precisions[..n];
            if ps.contains(&0.0) {
                0.0
            } else {
                bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
            }
        })
        .collect()
}

/// LCS length by plain recursion (inputs are tiny).
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs_brute(ra, rb)
            } else {
                lcs_brute(ra, b).max(lcs_brute(a, rb))
            }
        }
        _ => 0,
    }
}

pub fn rouge_brute(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut acc = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let l = lcs_brute(c, r) as f64;
        acc += prf(l, c.len() as f64, r.len() as f64).2;
    }
    acc / cands.len() as f64
}

pub fn random_sentence(rng: &mut Rng, max_len: usize, alphabet: usize) -> Vec<String> {
    (0..rng.below(max_len + 1)).map(|_| format!("w{}", rng.below(alphabet))).collect()
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}
