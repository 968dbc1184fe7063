//! Operation tape with reverse-mode differentiation.
//!
//! Each forward op appends a node holding its output value plus whatever it
//! needs for the backward pass. Values are immutable once recorded.

use crate::error::{mismatch, NumError, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::par::{self, Execution};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure of a caller-defined op: maps the output gradient to one
/// gradient per input (same order as the inputs).
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias { x: Var, bias: Var },
    AddBroadcastMid { x: Var, y: Var, mid: usize },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanMid { x: Var, mid: usize },
    ConcatLast { a: Var, b: Var, ca: usize, cb: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Attention(Box<AttentionSaved>),
    GateMix { a: Var, b: Var, g: Var },
    ClampMax { x: Var, cap: f64 },
    SoftmaxCe(Box<CeSaved>),
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    tq: usize,
    tk: usize,
    dim: usize,
    probs: Vec<f64>,
}

struct CeSaved {
    logits: Var,
    targets: Vec<usize>,
    weights: Vec<f64>,
    gamma: f64,
    norm: f64,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    exec: Execution,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            exec: Execution::default(),
        }
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attention probabilities `[B, heads, Tq, Tk]` saved by an attention op.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some((&s.probs, [s.batch, s.heads, s.tq, s.tk])),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::InvalidArgument(format!("non-finite output from {name}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push(value, Op::Param(name.to_string()), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.exec, self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, "matmul")
    }

    /// `a [m,k] · b [n,k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.exec, self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT { a, b, m, k, n }, "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Adds `bias [c]` to every row of `x [.., c]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(bias).numel() != c || self.value(bias).rank() != 1 {
            return Err(mismatch("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        self.push(out, Op::AddRowBias { x, bias }, "add_row_bias")
    }

    /// `x [B, M, D] + y [B, D]` broadcast over the middle axis.
    pub fn add_broadcast_mid(&mut self, x: Var, y: Var) -> Result<Var> {
        let (bsz, mid, d) = match self.shape(x) {
            [b, m, d] => (*b, *m, *d),
            _ => return Err(mismatch("add_broadcast_mid", self.shape(x), self.shape(y))),
        };
        if self.shape(y) != [bsz, d] {
            return Err(mismatch("add_broadcast_mid", self.shape(x), self.shape(y)));
        }
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let b = r / mid;
            row.iter_mut().zip(&yv[b * d..(b + 1) * d]).for_each(|(v, w)| *v += w);
        }
        self.push(out, Op::AddBroadcastMid { x, y, mid }, "add_broadcast_mid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).relu();
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).sigmoid();
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Per-row layer normalization with learned scale and shift, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, xhat, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            1e-5,
        );
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Rate 0 returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::InvalidArgument(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(NumError::InvalidArgument("mean of empty tensor".into()));
        }
        let s = self.value(x).sum() / n as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean over the middle axis: `[B, M, D] -> [B, D]`.
    pub fn mean_mid(&mut self, x: Var) -> Result<Var> {
        let (bsz, mid, d) = match self.shape(x) {
            [b, m, d] if *m > 0 => (*b, *m, *d),
            other => {
                return Err(NumError::InvalidArgument(format!(
                    "mean_mid expects [B, M>0, D], got {other:?}"
                )))
            }
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let o = &mut out[b * d..(b + 1) * d];
            for m in 0..mid {
                let row = &xv[(b * mid + m) * d..(b * mid + m + 1) * d];
                o.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a /= mid as f64);
        }
        self.push(Tensor::new(vec![bsz, d], out)?, Op::MeanMid { x, mid }, "mean_mid")
    }

    /// Concatenates `[R, ca]` and `[R, cb]` along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(mismatch("concat_last", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatLast { a, b, ca, cb }, "concat_last")
    }

    /// Row lookup into `table [V, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(NumError::InvalidArgument(format!("row id {i} out of range for table of {v} rows")));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows { table, ids: ids.to_vec() },
            "gather_rows",
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [B,Tq,D]`, `k`/`v [B,Tk,D]`; heads split `D` into contiguous slices
    /// of width `D/heads` and scores are scaled by `1/sqrt(D/heads)`. With
    /// `causal`, query `i` only sees keys `j <= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (batch, tq, dim) = match self.shape(q) {
            [b, t, d] => (*b, *t, *d),
            _ => return Err(mismatch("attention", self.shape(q), self.shape(k))),
        };
        let tk = match self.shape(k) {
            [b, t, d] if *b == batch && *d == dim => *t,
            _ => return Err(mismatch("attention", self.shape(q), self.shape(k))),
        };
        if self.shape(v) != self.shape(k) {
            return Err(mismatch("attention", self.shape(k), self.shape(v)));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(NumError::InvalidArgument(format!("{dim} not divisible into {heads} heads")));
        }
        if tk == 0 {
            return Err(NumError::InvalidArgument("attention over zero keys".into()));
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blocks = par::map_range(self.exec, batch, |b| {
            attention_forward_one(
                &qv[b * tq * dim..(b + 1) * tq * dim],
                &kv[b * tk * dim..(b + 1) * tk * dim],
                &vv[b * tk * dim..(b + 1) * tk * dim],
                tq,
                tk,
                dim,
                heads,
                causal,
            )
        });
        let mut out = Vec::with_capacity(batch * tq * dim);
        let mut probs = Vec::with_capacity(batch * heads * tq * tk);
        for (o, p) in blocks {
            out.extend(o);
            probs.extend(p);
        }
        let saved = AttentionSaved { q, k, v, heads, batch, tq, tk, dim, probs };
        self.push(Tensor::new(vec![batch, tq, dim], out)?, Op::Attention(Box::new(saved)), "attention")
    }

    /// Convex mix `a + g·(b − a)` with one gate value per leading index,
    /// clamped into the interval spanned by `a` and `b`.
    pub fn gate_mix(&mut self, a: Var, b: Var, g: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("gate_mix", self.shape(a), self.shape(b)));
        }
        let bsz = self.shape(a).first().copied().unwrap_or(1);
        if self.value(g).numel() != bsz {
            return Err(mismatch("gate_mix", self.shape(a), self.shape(g)));
        }
        let per = self.value(a).numel() / bsz.max(1);
        let (av, bv, gv) = (self.value(a).data(), self.value(b).data(), self.value(g).data());
        let out: Vec<f64> = av
            .iter()
            .zip(bv)
            .enumerate()
            .map(|(i, (&x, &y))| mix(x, y, gv[i / per]))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(out, Op::GateMix { a, b, g }, "gate_mix")
    }

    /// `min(x, cap)` element-wise; gradient passes where `x <= cap`.
    pub fn clamp_max(&mut self, x: Var, cap: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v <= cap { v } else { cap });
        self.push(out, Op::ClampMax { x, cap }, "clamp_max")
    }

    /// Weighted (focal) softmax cross-entropy over rows of `logits [R, C]`:
    /// `Σ_r w_r · (−(1−p_t)^γ · log p_t) / norm`. `γ = 0` is plain
    /// cross-entropy. A zero `norm` yields a zero loss.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize], weights: &[f64], gamma: f64, norm: f64) -> Result<Var> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r || weights.len() != r {
            return Err(NumError::InvalidArgument(format!(
                "softmax_ce: {r} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NumError::InvalidArgument(format!("target {t} out of range for {c} classes")));
        }
        if gamma < 0.0 {
            return Err(NumError::InvalidArgument(format!("focal gamma {gamma} < 0")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        kernels::softmax_rows_inplace(&mut probs, c);
        let mut total = 0.0;
        if norm != 0.0 {
            for row in 0..r {
                if weights[row] == 0.0 {
                    continue;
                }
                let z = &lv[row * c..(row + 1) * c];
                let logp = z[targets[row]] - kernels::log_sum_exp(z);
                let l = if gamma == 0.0 {
                    -logp
                } else {
                    -(1.0 - logp.exp()).max(0.0).powf(gamma) * logp
                };
                total += weights[row] * l;
            }
            total /= norm;
        }
        let saved = CeSaved {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            gamma,
            norm,
            probs,
        };
        self.push(Tensor::scalar(total), Op::SoftmaxCe(Box::new(saved)), "softmax_ce")
    }

    /// Records a caller-defined op whose value was computed outside the tape.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, "custom")
    }

    /// `x [.., in] · w [in, out] + b [out]`, keeping the leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().ok_or_else(|| NumError::InvalidArgument("linear on scalar".into()))?;
        let rows = self.value(x).numel() / din.max(1);
        let (win, wout) = self.value(w).dims2()?;
        if win != din {
            return Err(mismatch("linear", &shape, self.shape(w)));
        }
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, din])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_row_bias(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = wout;
            self.reshape(y, &out_shape)
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                op => {
                    for (var, t) in self.op_backward(op, &node.value, &g)? {
                        accumulate(&mut grads[var.0], t);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(grads)
    }

    fn op_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let exec = self.exec;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let mut da = vec![0.0; m * k];
                gemm_nt(exec, g.data(), val(*b).data(), *m, *n, *k, &mut da);
                let mut db = vec![0.0; k * n];
                gemm_tn(exec, val(*a).data(), g.data(), *m, *k, *n, &mut db);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::MatMulT { a, b, m, k, n } => {
                let mut da = vec![0.0; m * k];
                gemm_nn(exec, g.data(), val(*b).data(), *m, *n, *k, &mut da);
                let mut db = vec![0.0; n * k];
                gemm_tn(exec, g.data(), val(*a).data(), *m, *n, *k, &mut db);
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddRowBias { x, bias } => {
                let c = val(*bias).numel();
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.clone()), (*bias, like(*bias, db)?)]
            }
            Op::AddBroadcastMid { x, y, mid } => {
                let d = val(*y).last_dim();
                let mut dy = vec![0.0; val(*y).numel()];
                for (r, row) in g.data().chunks(d).enumerate() {
                    let b = r / mid;
                    dy[b * d..(b + 1) * d].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.clone()), (*y, like(*y, dy)?)]
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::SoftmaxRows(x) => {
                let c = out.last_dim();
                let mut d = vec![0.0; out.numel()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*x, like(*x, d)?)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = out.last_dim();
                let gam = val(*gamma).data();
                let mut dx = vec![0.0; out.numel()];
                let mut dgam = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, grow) in g.data().chunks(c).enumerate() {
                    let h = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = grow[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        dgam[j] += grow[j] * h[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = grow[j] * gam[j];
                        dx[r * c + j] = rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                vec![(*x, like(*x, dx)?), (*gamma, like(*gamma, dgam)?), (*beta, like(*beta, dbeta)?)]
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x))?)],
            Op::Sum(x) => vec![(*x, Tensor::full(self.shape(*x), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(self.shape(*x), g.item() / n))]
            }
            Op::MeanMid { x, mid } => {
                let d = out.last_dim();
                let mut dx = vec![0.0; val(*x).numel()];
                for (r, row) in dx.chunks_mut(d).enumerate() {
                    let b = r / mid;
                    let grow = &g.data()[b * d..(b + 1) * d];
                    row.iter_mut().zip(grow).for_each(|(a, v)| *a = v / *mid as f64);
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::ConcatLast { a, b, ca, cb } => {
                let mut da = Vec::with_capacity(val(*a).numel());
                let mut db = Vec::with_capacity(val(*b).numel());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..*ca]);
                    db.extend_from_slice(&row[*ca..]);
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::GatherRows { table, ids } => {
                let d = out.last_dim();
                let mut dt = vec![0.0; val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[r * d..(r + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*table, like(*table, dt)?)]
            }
            Op::Attention(s) => {
                let (qv, kv, vv) = (val(s.q).data(), val(s.k).data(), val(s.v).data());
                let (tq, tk, dim, heads) = (s.tq, s.tk, s.dim, s.heads);
                let blocks = par::map_range(exec, s.batch, |b| {
                    attention_backward_one(
                        &qv[b * tq * dim..(b + 1) * tq * dim],
                        &kv[b * tk * dim..(b + 1) * tk * dim],
                        &vv[b * tk * dim..(b + 1) * tk * dim],
                        &s.probs[b * heads * tq * tk..(b + 1) * heads * tq * tk],
                        &g.data()[b * tq * dim..(b + 1) * tq * dim],
                        tq,
                        tk,
                        dim,
                        heads,
                    )
                });
                let mut dq = Vec::with_capacity(qv.len());
                let mut dk = Vec::with_capacity(kv.len());
                let mut dv = Vec::with_capacity(vv.len());
                for (a, b, c) in blocks {
                    dq.extend(a);
                    dk.extend(b);
                    dv.extend(c);
                }
                vec![(s.q, like(s.q, dq)?), (s.k, like(s.k, dk)?), (s.v, like(s.v, dv)?)]
            }
            Op::GateMix { a, b, g: gate } => {
                let bsz = val(*gate).numel();
                let per = out.numel() / bsz.max(1);
                let (av, bv, gv) = (val(*a).data(), val(*b).data(), val(*gate).data());
                let mut da = vec![0.0; out.numel()];
                let mut db = vec![0.0; out.numel()];
                let mut dg = vec![0.0; bsz];
                for i in 0..out.numel() {
                    let gi = gv[i / per];
                    let up = g.data()[i];
                    da[i] = (1.0 - gi) * up;
                    db[i] = gi * up;
                    dg[i / per] += (bv[i] - av[i]) * up;
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?), (*gate, like(*gate, dg)?)]
            }
            Op::ClampMax { x, cap } => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv <= *cap { *gv } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::SoftmaxCe(s) => {
                let (r, c) = val(s.logits).dims2()?;
                let mut d = vec![0.0; r * c];
                if s.norm != 0.0 {
                    let up = g.item() / s.norm;
                    for row in 0..r {
                        let w = s.weights[row];
                        if w == 0.0 {
                            continue;
                        }
                        let p = &s.probs[row * c..(row + 1) * c];
                        let t = s.targets[row];
                        let z = &val(s.logits).data()[row * c..(row + 1) * c];
                        let logp = z[t] - kernels::log_sum_exp(z);
                        // dℓ/d(log p_t)
                        let dl_du = if s.gamma == 0.0 {
                            -1.0
                        } else {
                            let pt = logp.exp();
                            let one_m = (1.0 - pt).max(0.0);
                            let first = if one_m > 0.0 {
                                s.gamma * one_m.powf(s.gamma - 1.0) * pt * logp
                            } else {
                                0.0
                            };
                            first - one_m.powf(s.gamma)
                        };
                        for j in 0..c {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            d[row * c + j] = up * w * dl_du * (delta - p[j]);
                        }
                    }
                }
                vec![(s.logits, like(s.logits, d)?)]
            }
            Op::Custom { inputs, backward } => {
                let gs = backward(g);
                if gs.len() != inputs.len() {
                    return Err(NumError::InvalidArgument(format!(
                        "custom op returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                let mut outv = Vec::with_capacity(gs.len());
                for (v, t) in inputs.iter().zip(gs) {
                    if t.numel() != val(*v).numel() {
                        return Err(mismatch("custom backward", self.shape(*v), t.shape()));
                    }
                    outv.push((*v, t.reshape(self.shape(*v))?));
                }
                outv
            }
        })
    }
}

fn mix(a: f64, b: f64, g: f64) -> f64 {
    let v = a + g * (b - a);
    v.clamp(a.min(b), a.max(b))
}

#[allow(clippy::too_many_arguments)]
fn attention_forward_one(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    dim: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * dim];
    let mut probs = vec![0.0; heads * tq * tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let limit = if causal { (i + 1).min(tk) } else { tk };
            let qi = &q[i * dim + off..i * dim + off + dh];
            let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            for j in 0..limit {
                let kj = &k[j * dim + off..j * dim + off + dh];
                p[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            kernels::softmax_rows_inplace(&mut p[..limit], limit);
            let o = &mut out[i * dim + off..i * dim + off + dh];
            for j in 0..limit {
                let vj = &v[j * dim + off..j * dim + off + dh];
                let pj = p[j];
                o.iter_mut().zip(vj).for_each(|(a, b)| *a += pj * b);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward_one(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    tq: usize,
    tk: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; tq * dim];
    let mut dk = vec![0.0; tk * dim];
    let mut dv = vec![0.0; tk * dim];
    let mut dp = vec![0.0; tk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..tq {
            let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let gi = &g[i * dim + off..i * dim + off + dh];
            let mut dot = 0.0;
            for j in 0..tk {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v[j * dim + off..j * dim + off + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * dim + off..j * dim + off + dh];
                dvj.iter_mut().zip(gi).for_each(|(a, b)| *a += p[j] * b);
            }
            let qi = &q[i * dim + off..i * dim + off + dh];
            for j in 0..tk {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                let kj = &k[j * dim + off..j * dim + off + dh];
                let dqi = &mut dq[i * dim + off..i * dim + off + dh];
                dqi.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                let dkj = &mut dk[j * dim + off..j * dim + off + dh];
                dkj.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
            }
        }
    }
    (dq, dk, dv)
}
