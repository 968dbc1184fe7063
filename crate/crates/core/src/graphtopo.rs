//! Disease co-occurrence graph: counts, geometric normalization,
//! percentile sparsification and symmetric degree normalization.

use numcore::{par, Execution, Rng, Tensor};

use crate::datagen::{sample_labels, Generator};
use crate::error::{data_err, Result};

/// Symmetric co-occurrence counts; `get(i, i)` is the positive count of `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoocCounts {
    n: usize,
    counts: Vec<u64>,
}

impl CoocCounts {
    pub fn zeros(n: usize) -> Self {
        CoocCounts {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_flat(n: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), n * n);
        CoocCounts { n, counts }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    pub fn flat(&self) -> &[u64] {
        &self.counts
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.counts.iter().map(|&c| c as f64).collect()).unwrap()
    }

    /// Adds one sample's binary label row.
    fn add_row(&mut self, row: &[u8]) {
        let n = self.n;
        for i in 0..n {
            if row[i] == 1 {
                for j in 0..n {
                    if row[j] == 1 {
                        self.counts[i * n + j] += 1;
                    }
                }
            }
        }
    }
}

/// `M = Yᵀ·Y` over binary label rows of width `n`.
pub fn count_cooccurrence<R: AsRef<[u8]>>(labels: &[R], n: usize) -> Result<CoocCounts> {
    let mut m = CoocCounts::zeros(n);
    for (r, row) in labels.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != n {
            return Err(data_err(format!("label row {r} has {} entries, expected {n}", row.len())));
        }
        if let Some(v) = row.iter().find(|&&v| v > 1) {
            return Err(data_err(format!("label row {r} holds non-binary value {v}")));
        }
        m.add_row(row);
    }
    Ok(m)
}

/// `M'_ij = M_ij / sqrt(M_ii · M_jj)`, zero where either diagonal is zero.
pub fn geometric_normalize(m: &CoocCounts) -> Tensor {
    let n = m.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = m.get(i, i) as f64 * m.get(j, j) as f64;
            if d > 0.0 {
                out[i * n + j] = m.get(i, j) as f64 / d.sqrt();
            }
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

/// Nearest-rank `phi`-th percentile of the strictly upper triangle of a
/// square matrix. `None` for graphs with fewer than two nodes.
pub fn upper_percentile(m: &Tensor, phi: f64) -> Option<f64> {
    let n = m.shape()[0];
    let mut vals: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| m.at2(i, j))
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let rank = ((phi / 100.0) * vals.len() as f64).ceil().max(1.0) as usize;
    Some(vals[rank.min(vals.len()) - 1])
}

#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub a_tilde: Tensor,
    /// Binary edge matrix before self-loops.
    pub a_thresh: Tensor,
    pub phi: f64,
    pub threshold: Option<f64>,
    /// Undirected off-diagonal edges kept.
    pub retained_edges: usize,
}

/// `D^-1/2 (A + I) D^-1/2` on a binary symmetric `a`.
pub fn symmetric_normalize(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut hat = a.clone();
    for i in 0..n {
        hat.data_mut()[i * n + i] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| hat.row(i).iter().sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = hat.at2(i, j);
            if v != 0.0 {
                out[i * n + j] = v / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

pub fn build_adjacency(m_prime: &Tensor, phi: f64) -> Result<NormalizedAdjacency> {
    if !(0.0..100.0).contains(&phi) {
        return Err(crate::error::config_err(format!("phi {phi} outside [0, 100)")));
    }
    let n = m_prime.shape()[0];
    let threshold = upper_percentile(m_prime, phi);
    let mut a = Tensor::zeros(&[n, n]);
    let mut retained = 0;
    if let Some(t) = threshold {
        for i in 0..n {
            for j in i + 1..n {
                if m_prime.at2(i, j) > t {
                    a.data_mut()[i * n + j] = 1.0;
                    a.data_mut()[j * n + i] = 1.0;
                    retained += 1;
                }
            }
        }
    }
    Ok(NormalizedAdjacency {
        a_tilde: symmetric_normalize(&a),
        a_thresh: a,
        phi,
        threshold,
        retained_edges: retained,
    })
}

/// Row-normalized `M + I` on raw counts, without normalization or thresholding.
pub fn vanilla_adjacency(m: &CoocCounts) -> Tensor {
    let n = m.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| m.get(i, j) as f64 + if i == j { 1.0 } else { 0.0 })
            .collect();
        let s: f64 = row.iter().sum();
        for j in 0..n {
            out[i * n + j] = row[j] / s;
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

/// Largest eigenvalue magnitude by power iteration from the all-ones vector.
pub fn spectral_radius(m: &Tensor, iters: usize) -> f64 {
    let n = m.shape()[0];
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..n).map(|i| m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Monte-Carlo estimate of the generator's co-occurrence counts over `n_mc`
/// fresh label draws, using the same per-item streams as dataset generation.
pub fn mc_cooccurrence_oracle(gen: &Generator, n_mc: usize, seed: u64, unc_positive: bool) -> CoocCounts {
    let n = gen.n_diseases();
    let chunk = 4096;
    let parts = par::map_range(Execution::default(), n_mc.div_ceil(chunk), |c| {
        let mut m = CoocCounts::zeros(n);
        for id in c * chunk..((c + 1) * chunk).min(n_mc) {
            let mut rng = Rng::stream(seed, id as u64);
            let labels = sample_labels(gen, &mut rng);
            m.add_row(&labels.binary(unc_positive));
        }
        m.counts
    });
    CoocCounts {
        n,
        counts: par::sum_counts(Execution::default(), parts, n * n),
    }
}

/// Square matrix as CSV. The single header line starts with the stage name
/// followed by the column node names.
pub fn matrix_csv(stage: &str, m: &Tensor, names: &[&str]) -> String {
    let n = m.shape()[0];
    let mut s = stage.to_string();
    for name in names.iter().take(n) {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for i in 0..n {
        s.push_str(names.get(i).copied().unwrap_or(""));
        for j in 0..n {
            s.push_str(&format!(",{}", m.at2(i, j)));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let rows = [vec![1u8, 1, 0], vec![1, 0, 0]];
        let m = count_cooccurrence(&rows, 3).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 1)), (2, 1, 1));
        assert!(count_cooccurrence(&[vec![2u8, 0, 0]], 3).is_err());
        let empty: [Vec<u8>; 0] = [];
        assert!(count_cooccurrence(&empty, 3).unwrap().flat().iter().all(|&c| c == 0));
    }

    #[test]
    fn geometric_example() {
        let m = CoocCounts::from_flat(3, vec![4, 2, 0, 2, 9, 0, 0, 0, 0]);
        let mp = geometric_normalize(&m);
        assert!((mp.at2(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mp.at2(0, 0), 1.0);
        assert_eq!(mp.at2(2, 2), 0.0);
    }

    #[test]
    fn two_node_edge_and_ties() {
        let mp = Tensor::new(vec![2, 2], vec![1.0, 0.4, 0.4, 1.0]).unwrap();
        // phi = 0 keeps values strictly above the minimum: none here.
        let adj = build_adjacency(&mp, 0.0).unwrap();
        assert_eq!(adj.retained_edges, 0);
        let mut forced = Tensor::zeros(&[2, 2]);
        forced.data_mut()[1] = 1.0;
        forced.data_mut()[2] = 1.0;
        let at = symmetric_normalize(&forced);
        assert!(at.data().iter().all(|&v| v == 0.5));
    }
}
