//! Classification and text-generation metrics.
//!
//! Classification metrics only look at the leading [`N_CORE`] columns.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::datagen::{CLAUSE_END, NEG_CLAUSES, NORMAL_SUMMARY, POS_CLAUSES};
use crate::error::{data_err, Result};
use crate::nodes::{ClinicalState, DISEASES, N_CORE};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl ClassScores {
    fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        ClassScores {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CeReport {
    pub n_samples: usize,
    pub micro: ClassScores,
    pub sample_precision: f64,
    pub sample_recall: f64,
    pub sample_f1: f64,
    pub per_class: Vec<ClassScores>,
}

/// Micro, sample-level and per-class precision/recall/F1 over the core columns.
///
/// A sample with neither true nor predicted positives scores 1 on every
/// sample-level metric.
pub fn ce_metrics<R: AsRef<[u8]>>(pred: &[R], truth: &[R]) -> Result<CeReport> {
    if pred.len() != truth.len() {
        return Err(data_err(format!("{} prediction rows vs {} truth rows", pred.len(), truth.len())));
    }
    let width = truth.first().map_or(N_CORE, |r| r.as_ref().len());
    let k = width.min(N_CORE);
    let mut counts = vec![[0u64; 4]; k];
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != t.len() || t.len() != width {
            return Err(data_err(format!("row {i}: prediction width {} vs truth width {}", p.len(), t.len())));
        }
        let (mut tp, mut np, mut nt) = (0u64, 0u64, 0u64);
        for c in 0..k {
            let (pc, tc) = (p[c], t[c]);
            if pc > 1 || tc > 1 {
                return Err(data_err(format!("row {i}: non-binary entry in column {c}")));
            }
            let slot = match (pc, tc) {
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 1) => 2,
                _ => 3,
            };
            counts[c][slot] += 1;
            tp += (pc & tc) as u64;
            np += pc as u64;
            nt += tc as u64;
        }
        if np == 0 && nt == 0 {
            sp += 1.0;
            sr += 1.0;
            sf += 1.0;
        } else {
            let (a, b) = (ratio(tp as f64, np as f64), ratio(tp as f64, nt as f64));
            sp += a;
            sr += b;
            sf += harmonic(a, b);
        }
    }
    let per_class: Vec<ClassScores> = counts.iter().map(|c| ClassScores::from_counts(c[0], c[1], c[2], c[3])).collect();
    let sum = |j: usize| counts.iter().map(|c| c[j]).sum::<u64>();
    let n = pred.len();
    Ok(CeReport {
        n_samples: n,
        micro: ClassScores::from_counts(sum(0), sum(1), sum(2), sum(3)),
        sample_precision: ratio(sp, n as f64),
        sample_recall: ratio(sr, n as f64),
        sample_f1: ratio(sf, n as f64),
        per_class,
    })
}

/// Area under the ROC curve via the rank statistic with averaged tie ranks.
/// `None` unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-1..`max_n` with clipped counts and brevity penalty.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(data_err("BLEU over an empty candidate set"));
    }
    if candidates.len() != references.len() {
        return Err(data_err(format!("{} candidates vs {} references", candidates.len(), references.len())));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, cnt) in ngram_counts(c, n) {
                matched[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        let p = ratio(matched[n] as f64, total[n] as f64);
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    Ok(out)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// Mean over pairs of the LCS F1 score.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let l = lcs_len(c, r) as f64;
            harmonic(ratio(l, c.len() as f64), ratio(l, r.len() as f64))
        })
        .sum();
    total / candidates.len() as f64
}

/// Indices of samples with at least two positive core findings.
pub fn complex_subset<R: AsRef<[u8]>>(truth: &[R]) -> Vec<usize> {
    truth
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_ref().iter().take(N_CORE).filter(|&&v| v == 1).count() >= 2)
        .map(|(i, _)| i)
        .collect()
}

/// Inverts the report templates: POS or NEG per node where a clause was
/// found, `None` for unmentioned nodes.
pub fn extract_findings(report: &[String]) -> Vec<Option<ClinicalState>> {
    let mut out = vec![None; DISEASES.len()];
    let text = report.join(" ");
    for clause in text.split(&format!(" {CLAUSE_END}")).map(str::trim) {
        let clause = clause.trim_end_matches(CLAUSE_END).trim();
        if clause.is_empty() || clause == NORMAL_SUMMARY {
            continue;
        }
        if let Some(d) = POS_CLAUSES.iter().position(|c| *c == clause) {
            out[d] = Some(ClinicalState::Pos);
        } else if let Some((d, _)) = NEG_CLAUSES.iter().find(|(_, c)| *c == clause) {
            out[*d] = Some(ClinicalState::Neg);
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub ce: CeReport,
    pub auc: Vec<Option<f64>>,
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
    pub n_reports: usize,
    pub complex: CeReport,
}

impl MetricsReport {
    /// Macro mean over classes with a defined AUC.
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self.auc.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `name,value,n` rows; the per-class block uses `class.<disease>.<metric>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,value,n\n");
        let mut row = |name: &str, v: f64, n: usize| {
            let _ = writeln!(s, "{name},{v},{n}");
        };
        let n = self.ce.n_samples;
        row("micro_precision", self.ce.micro.precision, n);
        row("micro_recall", self.ce.micro.recall, n);
        row("micro_f1", self.ce.micro.f1, n);
        row("sample_precision", self.ce.sample_precision, n);
        row("sample_recall", self.ce.sample_recall, n);
        row("sample_f1", self.ce.sample_f1, n);
        row("mean_auc", self.mean_auc().unwrap_or(f64::NAN), self.auc.iter().flatten().count());
        for (i, b) in self.bleu.iter().enumerate() {
            row(&format!("bleu_{}", i + 1), *b, self.n_reports);
        }
        row("rouge_l", self.rouge_l, self.n_reports);
        let nc = self.complex.n_samples;
        row("complex_micro_precision", self.complex.micro.precision, nc);
        row("complex_micro_recall", self.complex.micro.recall, nc);
        row("complex_micro_f1", self.complex.micro.f1, nc);
        for (c, cs) in self.ce.per_class.iter().enumerate() {
            let name = DISEASES[c];
            let pos = (cs.tp + cs.fn_) as usize;
            row(&format!("class.{name}.precision"), cs.precision, pos);
            row(&format!("class.{name}.recall"), cs.recall, pos);
            row(&format!("class.{name}.f1"), cs.f1, pos);
            row(&format!("class.{name}.auc"), self.auc.get(c).copied().flatten().unwrap_or(f64::NAN), n);
            for (k, v) in [("tp", cs.tp), ("fp", cs.fp), ("fn", cs.fn_), ("tn", cs.tn)] {
                row(&format!("class.{name}.{k}"), v as f64, n);
            }
        }
        for (c, cs) in self.complex.per_class.iter().enumerate() {
            row(&format!("complex.{}.f1", DISEASES[c]), cs.f1, (cs.tp + cs.fn_) as usize);
        }
        s
    }
}
