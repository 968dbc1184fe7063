//! Four-state main head tied to the graph weights, binary auxiliary head and
//! its losses, per-class threshold calibration and prompt construction.
//!
//! Binary losses act on logits `z` with `p = sigmoid(z)`. For a positive the
//! term is `-(1-q)^γ+ · ln q`; for a negative it is `-p_m^γ- · ln(1-p_m)` with
//! `p_m = max(q - m, 0)`, where `q = clamp(p, δ, 1-δ)` and no gradient flows
//! through a saturated clamp. Plain BCE is `γ± = 0, m = 0, δ = 0`; the masked
//! variant drops entries whose state is BLA from both sum and count.
//!
//! The weighted focal main loss uses `w_{d,c} = n / (4 · count_{d,c})` from the
//! training states with focusing exponent `γ`.

use std::fmt::Write as _;
use std::path::Path;

use numcore::{par, Execution, LrGroup, ParamStore, Rng, Tape, Tensor, Var};

use crate::config::{AuxLoss, RunConfig};
use crate::error::{data_err, Result};
use crate::layers::{init_linear, linear, normal_tensor};
use crate::nodes::{ClinicalState, DISEASES, N_STATES};

pub const MAIN_W: &str = "main.w";
pub const MAIN_BIAS: &str = "main.bias";
pub const AUX_HIDDEN: &str = "aux.hidden";
pub const AUX_OUT: &str = "aux.out";

/// Plain classifier block used when the graph branch is disabled.
pub fn init_plain_weights(s: &mut ParamStore, rng: &mut Rng, n: usize, d_h: usize) -> Result<()> {
    let std = (2.0 / (N_STATES + d_h) as f64).sqrt();
    s.insert(MAIN_W, normal_tensor(rng, &[n * N_STATES, d_h], std), LrGroup::NewModules)?;
    Ok(())
}

pub fn init_heads(s: &mut ParamStore, rng: &mut Rng, n: usize, d_x: usize, d_f: usize) -> Result<()> {
    s.insert(MAIN_BIAS, Tensor::zeros(&[n * N_STATES]), LrGroup::NewModules)?;
    init_linear(s, rng, AUX_HIDDEN, d_x, d_f, LrGroup::NewModules)?;
    init_linear(s, rng, AUX_OUT, d_f, n, LrGroup::NewModules)?;
    Ok(())
}

/// `logits[b·n + d, c] = <W[d·4 + c], x_b> + bias[d·4 + c]`, shaped `[B·n, 4]`.
pub fn main_forward(t: &mut Tape, s: &ParamStore, x: Var, w: Var) -> Result<Var> {
    let bias = t.param(s, MAIN_BIAS)?;
    let b = t.shape(x)[0];
    let rows = t.shape(w)[0];
    let z = t.matmul_t(x, w)?;
    let z = t.add_row_bias(z, bias)?;
    Ok(t.reshape(z, &[b * rows / N_STATES, N_STATES])?)
}

/// Mean cross-entropy over rows; with `weights`, focal weighted variant.
pub fn main_loss(t: &mut Tape, logits: Var, states: &[u8], focal: Option<(&[f64], f64)>) -> Result<Var> {
    let rows = t.shape(logits)[0];
    if states.len() != rows {
        return Err(data_err(format!("{} state labels for {rows} rows", states.len())));
    }
    if let Some(bad) = states.iter().find(|&&c| c as usize >= N_STATES) {
        return Err(data_err(format!("state label {bad} out of range")));
    }
    let targets: Vec<usize> = states.iter().map(|&c| c as usize).collect();
    let (weights, gamma) = match focal {
        Some((w, g)) => (w.to_vec(), g),
        None => (vec![1.0; rows], 0.0),
    };
    Ok(t.softmax_ce(logits, &targets, &weights, gamma, rows as f64)?)
}

/// Per (disease, state) inverse-frequency weights, flattened `[n·4]`.
/// States absent from training get weight 0.
pub fn wfl_class_weights<R: AsRef<[ClinicalState]>>(train_states: &[R], n: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n * N_STATES];
    for row in train_states {
        for (d, st) in row.as_ref().iter().take(n).enumerate() {
            counts[d * N_STATES + st.code() as usize] += 1;
        }
    }
    let total = train_states.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total / (N_STATES as f64 * c as f64) })
        .collect()
}

pub struct AuxOut {
    pub f_cond: Var,
    pub logits: Var,
    pub p: Var,
}

pub fn aux_forward(t: &mut Tape, s: &ParamStore, x: Var) -> Result<AuxOut> {
    let h = linear(t, s, AUX_HIDDEN, x)?;
    let f_cond = t.relu(h)?;
    let logits = linear(t, s, AUX_OUT, f_cond)?;
    let p = t.sigmoid(logits)?;
    Ok(AuxOut { f_cond, logits, p })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub clamp: f64,
}

impl AslParams {
    pub const BCE: AslParams = AslParams { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0, clamp: 0.0 };

    /// Loss parameters and whether BLA entries are masked, or `None` for no auxiliary loss.
    pub fn for_config(cfg: &RunConfig) -> Option<(AslParams, bool)> {
        let asl = AslParams {
            gamma_pos: cfg.gamma_pos,
            gamma_neg: cfg.gamma_neg,
            margin: cfg.margin,
            clamp: 0.0,
        };
        match cfg.aux_loss {
            AuxLoss::None => None,
            AuxLoss::Mbce => Some((AslParams::BCE, true)),
            AuxLoss::Asl => Some((asl, false)),
            AuxLoss::Tasl => Some((AslParams { clamp: cfg.clamp_delta, ..asl }, false)),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Loss term and its derivative with respect to the logit.
pub fn asl_term(z: f64, y: u8, a: AslParams) -> (f64, f64) {
    let p = numcore::kernels::sigmoid(z);
    let clamped = a.clamp > 0.0 && (p <= a.clamp || p >= 1.0 - a.clamp);
    let q = if clamped { p.clamp(a.clamp, 1.0 - a.clamp) } else { p };
    let dp = if clamped { 0.0 } else { p * (1.0 - p) };
    if y == 1 {
        let lq = if clamped { q.ln() } else { -softplus(-z) };
        let one_m = 1.0 - q;
        let val = -one_m.powf(a.gamma_pos) * lq;
        let grad = if clamped {
            0.0
        } else {
            // d/dz of -(1-p)^γ ln p, written without dividing by p.
            a.gamma_pos * p * one_m.powf(a.gamma_pos) * lq - one_m.powf(a.gamma_pos + 1.0)
        };
        (val, grad)
    } else {
        let pm = q - a.margin;
        if pm <= 0.0 {
            return (0.0, 0.0);
        }
        let exact = a.margin == 0.0 && !clamped;
        let l1m = if exact { -softplus(z) } else { (1.0 - pm).ln() };
        let val = -pm.powf(a.gamma_neg) * l1m;
        if clamped {
            return (val, 0.0);
        }
        let focus = if a.gamma_neg == 0.0 { 0.0 } else { -a.gamma_neg * pm.powf(a.gamma_neg - 1.0) * l1m * dp };
        let ratio = if exact { 1.0 } else { (1.0 - p) / (1.0 - pm) };
        (val, focus + pm.powf(a.gamma_neg) * p * ratio)
    }
}

/// Same term evaluated from a probability (value only).
pub fn asl_term_prob(p: f64, y: u8, a: AslParams) -> f64 {
    let q = if a.clamp > 0.0 { p.clamp(a.clamp, 1.0 - a.clamp) } else { p };
    if y == 1 {
        -(1.0 - q).powf(a.gamma_pos) * q.ln()
    } else {
        let pm = (q - a.margin).max(0.0);
        if pm == 0.0 {
            0.0
        } else {
            -pm.powf(a.gamma_neg) * (1.0 - pm).ln()
        }
    }
}

/// Mean binary loss over unmasked entries of `logits` (any shape, row-major
/// aligned with `y`). Zero when nothing is included.
pub fn binary_loss(t: &mut Tape, logits: Var, y: &[u8], mask: Option<&[bool]>, a: AslParams) -> Result<Var> {
    let z = t.value(logits);
    if z.numel() != y.len() || mask.is_some_and(|m| m.len() != y.len()) {
        return Err(data_err(format!("binary loss: {} logits vs {} labels", z.numel(), y.len())));
    }
    let shape = z.shape().to_vec();
    let mut total = 0.0;
    let mut grad = vec![0.0; y.len()];
    let mut count = 0usize;
    for (i, (&zi, &yi)) in z.data().iter().zip(y).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (v, g) = asl_term(zi, yi, a);
        total += v;
        grad[i] = g;
        count += 1;
    }
    let norm = count.max(1) as f64;
    let grad = Tensor::new(shape, grad.into_iter().map(|g| g / norm).collect())?;
    Ok(t.custom(
        &[logits],
        Tensor::scalar(total / norm),
        Box::new(move |up| vec![grad.scale(up.item())]),
    )?)
}

fn class_f1(probs: &[f64], labels: &[u8], k: usize, d: usize, tau: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (row_p, row_y) in probs.chunks(k).zip(labels.chunks(k)) {
        match (row_p[d] >= tau, row_y[d] == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

/// Per-class threshold maximizing F1 on `grid` (ascending); ties keep the
/// smallest. Classes without positives get 0.5. Inputs are row-major `[rows, k]`.
pub fn ots(probs: &[f64], labels: &[u8], k: usize, grid: &[f64], exec: Execution) -> Result<Vec<f64>> {
    if k == 0 || probs.len() != labels.len() || !probs.len().is_multiple_of(k) {
        return Err(data_err(format!("ots: {} probabilities vs {} labels over {k} classes", probs.len(), labels.len())));
    }
    if grid.is_empty() || grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(data_err("ots: grid must be nonempty and inside (0,1)".to_string()));
    }
    Ok(par::map_range(exec, k, |d| {
        if !labels.chunks(k).any(|r| r[d] == 1) {
            return 0.5;
        }
        let mut best = (f64::NEG_INFINITY, 0.5);
        for &tau in grid {
            let f = class_f1(probs, labels, k, d, tau);
            if f > best.0 {
                best = (f, tau);
            }
        }
        best.1
    }))
}

/// Binary decisions `p ≥ τ_d` and prompt states from the main-head argmax
/// (ties go to the lowest state code). `main_logits` is `[rows·k, 4]`.
pub fn decide_and_prompt(main_logits: &[f64], p: &[f64], tau: &[f64]) -> (Vec<Vec<u8>>, Vec<Vec<ClinicalState>>) {
    let k = tau.len();
    let decisions = p
        .chunks(k)
        .map(|row| row.iter().zip(tau).map(|(&v, &t)| u8::from(v >= t)).collect())
        .collect();
    let prompts = main_logits
        .chunks(k * N_STATES)
        .map(|row| row.chunks(N_STATES).map(argmax_state).collect())
        .collect();
    (decisions, prompts)
}

pub fn argmax_state(logits: &[f64]) -> ClinicalState {
    let mut best = 0;
    for c in 1..N_STATES {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    ClinicalState::from_code(best as u8).unwrap()
}

/// Positive-class probability from the main head: softmax mass on POS (and
/// UNC when uncertain counts as positive). Used when no auxiliary loss trains `p`.
pub fn main_head_probs(main_logits: &[f64], unc_positive: bool) -> Vec<f64> {
    main_logits
        .chunks(N_STATES)
        .map(|row| {
            let mut e = row.to_vec();
            numcore::kernels::softmax_rows_inplace(&mut e, N_STATES);
            e[0] + if unc_positive { e[3] } else { 0.0 }
        })
        .collect()
}

pub fn tau_text(tau: &[f64]) -> String {
    let mut s = String::new();
    for (d, t) in tau.iter().enumerate() {
        let _ = writeln!(s, "{}\t{t}", DISEASES[d]);
    }
    s
}

pub fn read_tau(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (name, v) = l
                .split_once('\t')
                .ok_or_else(|| data_err(format!("{} line {}: expected name<TAB>value", path.display(), i + 1)))?;
            if DISEASES.get(i).copied() != Some(name) {
                return Err(data_err(format!("{} line {}: unexpected node `{name}`", path.display(), i + 1)));
            }
            v.parse().map_err(|e| data_err(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
