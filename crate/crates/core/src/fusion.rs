//! Diagnosis-guided attention over patches and the gated convex fusion.

use numcore::{LrGroup, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::{config_err, Result};
use crate::layers::{init_layer_norm, init_linear, layer_norm, linear};

pub const GATE_HIDDEN: &str = "gate.l1";
pub const GATE_OUT: &str = "gate.l2";

fn block(b: usize, part: &str) -> String {
    format!("dgsa.{b}.{part}")
}

pub fn init_dgsa(s: &mut ParamStore, rng: &mut Rng, blocks: usize, d: usize, d_f: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(config_err(format!("width {d} not divisible by {heads} heads")));
    }
    let g = LrGroup::NewModules;
    for b in 0..blocks {
        init_linear(s, rng, &block(b, "q"), d, d, g)?;
        init_linear(s, rng, &block(b, "qc"), d_f, d, g)?;
        init_linear(s, rng, &block(b, "k"), d, d, g)?;
        init_linear(s, rng, &block(b, "v"), d, d, g)?;
        init_linear(s, rng, &block(b, "o"), d, d, g)?;
        init_layer_norm(s, &block(b, "ln1"), d, g)?;
        init_linear(s, rng, &block(b, "ff1"), d, 2 * d, g)?;
        init_linear(s, rng, &block(b, "ff2"), 2 * d, d, g)?;
        init_layer_norm(s, &block(b, "ln2"), d, g)?;
    }
    Ok(())
}

pub struct DgsaOut {
    pub out: Var,
    /// Attention node of each block; probabilities via `Tape::attention_probs`.
    pub attention: Vec<Var>,
}

/// Queries `P_q(V_i) + P_qc(f_cond)`, keys and values from the patches,
/// multi-head attention, then post-norm residual and feed-forward.
pub fn dgsa(t: &mut Tape, s: &ParamStore, f_cond: Var, v_spatial: Var, heads: usize, blocks: usize) -> Result<DgsaOut> {
    let mut h = v_spatial;
    let mut attention = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let q = linear(t, s, &block(b, "q"), h)?;
        let qc = linear(t, s, &block(b, "qc"), f_cond)?;
        let q = t.add_broadcast_mid(q, qc)?;
        let k = linear(t, s, &block(b, "k"), h)?;
        let v = linear(t, s, &block(b, "v"), h)?;
        let att = t.attention(q, k, v, heads, false)?;
        attention.push(att);
        let o = linear(t, s, &block(b, "o"), att)?;
        let r = t.add(h, o)?;
        let h1 = layer_norm(t, s, &block(b, "ln1"), r)?;
        let f = linear(t, s, &block(b, "ff1"), h1)?;
        let f = t.relu(f)?;
        let f = linear(t, s, &block(b, "ff2"), f)?;
        let r = t.add(h1, f)?;
        h = layer_norm(t, s, &block(b, "ln2"), r)?;
    }
    Ok(DgsaOut { out: h, attention })
}

pub fn init_gate(s: &mut ParamStore, rng: &mut Rng, d: usize, bias_init: f64) -> Result<()> {
    let hidden = (d / 2).max(1);
    init_linear(s, rng, GATE_HIDDEN, 2 * d, hidden, LrGroup::NewModules)?;
    init_linear(s, rng, GATE_OUT, hidden, 1, LrGroup::NewModules)?;
    s.set_value(&format!("{GATE_OUT}.b"), Tensor::full(&[1], bias_init))?;
    Ok(())
}

/// `g = sigmoid(MLP([gap(V_spatial), gap(V_attn)]))` per sample, optionally
/// capped, and `V_fused = V_spatial + g·(V_attn − V_spatial)`.
/// Returns `(V_fused, g)` with `g` shaped `[B, 1]`.
pub fn gate_fuse(t: &mut Tape, s: &ParamStore, v_spatial: Var, v_attn: Var, cap: Option<f64>) -> Result<(Var, Var)> {
    let gs = t.mean_mid(v_spatial)?;
    let ga = t.mean_mid(v_attn)?;
    let cat = t.concat_last(gs, ga)?;
    let h = linear(t, s, GATE_HIDDEN, cat)?;
    let h = t.relu(h)?;
    let z = linear(t, s, GATE_OUT, h)?;
    let mut g = t.sigmoid(z)?;
    if let Some(c) = cap.filter(|&c| c < 1.0) {
        g = t.clamp_max(g, c)?;
    }
    let fused = t.gate_mix(v_spatial, v_attn, g)?;
    Ok((fused, g))
}

/// Gate cap rising linearly from `start` to 1 over `steps` joint steps.
pub fn curriculum_cap(step: usize, steps: usize, start: f64) -> f64 {
    if steps == 0 {
        return 1.0;
    }
    start + (1.0 - start) * (step as f64 / steps as f64).min(1.0)
}

/// Attention of one block averaged over queries: `[B][heads][N]`.
pub fn attention_maps(t: &Tape, att: Var) -> Option<Vec<Vec<Vec<f64>>>> {
    let (probs, [b, h, tq, tk]) = t.attention_probs(att)?;
    Some(
        (0..b)
            .map(|bi| {
                (0..h)
                    .map(|hi| {
                        let base = (bi * h + hi) * tq * tk;
                        (0..tk)
                            .map(|j| (0..tq).map(|i| probs[base + i * tk + j]).sum::<f64>() / tq as f64)
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    )
}

/// CSV with header `sample,head,patch,weight`.
pub fn attention_csv(maps: &[Vec<Vec<f64>>]) -> String {
    let mut out = String::from("sample,head,patch,weight\n");
    for (b, heads) in maps.iter().enumerate() {
        for (h, row) in heads.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                out.push_str(&format!("{b},{h},{j},{w}\n"));
            }
        }
    }
    out
}
