//! Two-layer graph convolution turning node embeddings and the normalized
//! adjacency into the `[n·4, d_h]` classifier weight block, plus the
//! similarity diagnostics over that block.

use std::path::Path;

use numcore::{LrGroup, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::{config_err, data_err, Result};
use crate::layers::normal_tensor;
use crate::nodes::{ClinicalState, DISEASES, N_NODES, N_STATES};

pub const H0: &str = "tki.h0";
pub const W0: &str = "tki.w0";
pub const W1: &str = "tki.w1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TkiDims {
    pub n: usize,
    pub d_e: usize,
    pub d_g: usize,
    pub d_h: usize,
}

/// Registers embeddings (first `dims.n` rows of `h0`) and both GCN weights.
pub fn init(s: &mut ParamStore, rng: &mut Rng, dims: TkiDims, h0: &Tensor) -> Result<()> {
    let (rows, d_e) = h0.dims2()?;
    if d_e != dims.d_e || rows < dims.n {
        return Err(config_err(format!(
            "embeddings are {rows}x{d_e}, need at least {}x{}",
            dims.n, dims.d_e
        )));
    }
    let h = Tensor::new(vec![dims.n, d_e], h0.data()[..dims.n * d_e].to_vec())?;
    s.insert(H0, h, LrGroup::NewModules)?;
    let w1_cols = N_STATES * dims.d_h;
    s.insert(W0, normal_tensor(rng, &[dims.d_e, dims.d_g], (2.0 / (dims.d_e + dims.d_g) as f64).sqrt()), LrGroup::NewModules)?;
    s.insert(W1, normal_tensor(rng, &[dims.d_g, w1_cols], (2.0 / (dims.d_g + w1_cols) as f64).sqrt()), LrGroup::NewModules)?;
    Ok(())
}

/// `W = reshape(Â · dropout(relu(Â·H0·W0)) · W1)` to `[n·4, d_h]`, rows
/// ordered disease-major then state. Dropout applies only with an rng.
pub fn forward(t: &mut Tape, s: &ParamStore, adj: Var, dropout: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let h0 = t.param(s, H0)?;
    let w0 = t.param(s, W0)?;
    let w1 = t.param(s, W1)?;
    let n = t.shape(adj)[0];
    let mixed = t.matmul(adj, h0)?;
    let z = t.matmul(mixed, w0)?;
    let mut h1 = t.relu(z)?;
    if let Some(rng) = rng {
        h1 = t.dropout(h1, dropout, rng)?;
    }
    let mixed = t.matmul(adj, h1)?;
    let w = t.matmul(mixed, w1)?;
    let d_h = t.shape(w)[1] / N_STATES;
    Ok(t.reshape(w, &[n * N_STATES, d_h])?)
}

/// Cosine similarity between diseases after removing the across-disease mean.
/// `w` is `[n·4, d_h]`; with several states the per-disease vectors are the
/// concatenation of those state slices. Zero-norm rows get 0 off-diagonal.
pub fn mean_centered_cosine(w: &Tensor, states: &[ClinicalState]) -> Result<Tensor> {
    let (rows, d_h) = w.dims2()?;
    if rows % N_STATES != 0 || states.is_empty() {
        return Err(data_err(format!("weight block has {rows} rows, not a multiple of {N_STATES}")));
    }
    let n = rows / N_STATES;
    let vecs: Vec<Vec<f64>> = (0..n)
        .map(|d| {
            states
                .iter()
                .flat_map(|st| w.row(d * N_STATES + st.code() as usize).iter().copied())
                .collect()
        })
        .collect();
    let len = states.len() * d_h;
    let mean: Vec<f64> = (0..len).map(|k| vecs.iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = vecs.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                out[i * n + j] = c;
                out[j * n + i] = c;
            }
        }
    }
    Ok(Tensor::new(vec![n, n], out)?)
}

/// Loads `[18, d_e]` node embeddings from a text file (node name followed by
/// `d_e` floats per line; underscores in names stand for spaces) or draws
/// them from N(0, 0.02²) with a dedicated seed.
pub fn load_or_init_embeddings(path: Option<&Path>, d_e: usize, seed: u64) -> Result<Tensor> {
    let Some(path) = path else {
        let mut rng = Rng::new(seed ^ 0x5eed_e4b0);
        return Ok(normal_tensor(&mut rng, &[N_NODES, d_e], 0.02));
    };
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    parse_embeddings(&text, d_e)
}

pub fn parse_embeddings(text: &str, d_e: usize) -> Result<Tensor> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; N_NODES];
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let n_num = toks.iter().rev().take_while(|t| t.parse::<f64>().is_ok()).count();
        let name_toks = &toks[..toks.len() - n_num];
        if name_toks.is_empty() {
            return Err(data_err(format!("embeddings line {lineno}: missing node name")));
        }
        if n_num != d_e {
            return Err(data_err(format!("embeddings line {lineno}: {n_num} values, expected {d_e}")));
        }
        let name = name_toks.join(" ").replace('_', " ");
        let idx = crate::nodes::disease_index(&name)
            .ok_or_else(|| data_err(format!("embeddings line {lineno}: unknown node `{name}`")))?;
        if rows[idx].is_some() {
            return Err(data_err(format!("embeddings line {lineno}: duplicate node `{name}`")));
        }
        let vals: Vec<f64> = toks[toks.len() - n_num..].iter().map(|t| t.parse().unwrap()).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(data_err(format!("embeddings line {lineno}: non-finite value")));
        }
        rows[idx] = Some(vals);
    }
    let mut data = Vec::with_capacity(N_NODES * d_e);
    for (d, r) in rows.into_iter().enumerate() {
        match r {
            Some(v) => data.extend(v),
            None => return Err(data_err(format!("embeddings file is missing node `{}`", DISEASES[d]))),
        }
    }
    Ok(Tensor::new(vec![N_NODES, d_e], data)?)
}

/// Text form accepted by [`parse_embeddings`].
pub fn format_embeddings(h0: &Tensor) -> String {
    let d_e = h0.shape()[1];
    let mut out = String::new();
    for (d, name) in DISEASES.iter().enumerate().take(h0.shape()[0]) {
        out.push_str(&name.replace(' ', "_"));
        for k in 0..d_e {
            out.push_str(&format!(" {}", h0.at2(d, k)));
        }
        out.push('\n');
    }
    out
}
