//! Prompt-prefixed autoregressive decoder: causal self-attention,
//! cross-attention to the fused patches, post-norm blocks.
//!
//! Training runs on the tape with teacher forcing. Decoding uses a separate
//! key/value-cached path over plain slices that reproduces the tape logits.

use std::collections::HashMap;

use numcore::{LrGroup, ParamStore, Rng, Tape, Tensor, Var};

use crate::config::MaskMode;
use crate::datagen::report_words;
use crate::error::{config_err, data_err, Result};
use crate::layers::{affine_rows, init_layer_norm, init_linear, layer_norm, layer_norm_rows, linear, normal_tensor};
use crate::nodes::ClinicalState;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const STATE_BASE: usize = 3;

/// Dense token ids: specials, the four shared state tokens, then report words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
        tokens.extend(ClinicalState::ALL.iter().map(|s| s.token().to_string()));
        tokens.extend(report_words());
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn state_id(state: ClinicalState) -> usize {
        STATE_BASE + state.code() as usize
    }

    /// `[BOS, prompt…, words…, EOS]`, truncated to `max_len`.
    pub fn sequence(&self, prompt: &[ClinicalState], words: &[String], max_len: usize) -> Result<Vec<usize>> {
        let mut seq = vec![BOS];
        seq.extend(prompt.iter().map(|&s| Self::state_id(s)));
        for w in words {
            seq.push(self.id(w).ok_or_else(|| data_err(format!("word `{w}` not in vocabulary")))?);
        }
        seq.push(EOS);
        seq.truncate(max_len);
        Ok(seq)
    }

    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub vocab: usize,
    pub d_m: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Width of the fused patch features attended to.
    pub d_mem: usize,
}

fn name(l: usize, part: &str) -> String {
    format!("dec.{l}.{part}")
}

pub fn init(s: &mut ParamStore, rng: &mut Rng, d: DecoderDims) -> Result<()> {
    if d.heads == 0 || !d.d_m.is_multiple_of(d.heads) {
        return Err(config_err(format!("decoder width {} not divisible by {} heads", d.d_m, d.heads)));
    }
    let g = LrGroup::Decoder;
    s.insert("dec.tok", normal_tensor(rng, &[d.vocab, d.d_m], 0.1), g)?;
    s.insert("dec.pos", normal_tensor(rng, &[d.max_len, d.d_m], 0.1), g)?;
    for l in 0..d.layers {
        for p in ["q", "k", "v", "o", "cq"] {
            init_linear(s, rng, &name(l, p), d.d_m, d.d_m, g)?;
        }
        init_linear(s, rng, &name(l, "ck"), d.d_mem, d.d_m, g)?;
        init_linear(s, rng, &name(l, "cv"), d.d_mem, d.d_m, g)?;
        init_linear(s, rng, &name(l, "co"), d.d_m, d.d_m, g)?;
        init_linear(s, rng, &name(l, "ff1"), d.d_m, d.ffn, g)?;
        init_linear(s, rng, &name(l, "ff2"), d.ffn, d.d_m, g)?;
        for ln in ["ln1", "ln2", "ln3"] {
            init_layer_norm(s, &name(l, ln), d.d_m, g)?;
        }
    }
    init_linear(s, rng, "dec.out", d.d_m, d.vocab, g)?;
    Ok(())
}

/// Logits `[B·T, vocab]` for `tokens` (`B` rows of equal length `T`).
pub fn forward(t: &mut Tape, s: &ParamStore, d: DecoderDims, tokens: &[Vec<usize>], memory: Var) -> Result<Var> {
    let b = tokens.len();
    let len = tokens.first().map_or(0, Vec::len);
    if b == 0 || len == 0 {
        return Err(data_err("decoder needs at least one token"));
    }
    if len > d.max_len {
        return Err(data_err(format!("sequence length {len} exceeds max_len {}", d.max_len)));
    }
    if tokens.iter().any(|r| r.len() != len) {
        return Err(data_err("decoder rows must share one length"));
    }
    if let Some(&bad) = tokens.iter().flatten().find(|&&id| id >= d.vocab) {
        return Err(data_err(format!("token id {bad} outside vocabulary of {}", d.vocab)));
    }
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
    let tok = t.param(s, "dec.tok")?;
    let pos = t.param(s, "dec.pos")?;
    let e = t.gather_rows(tok, &ids)?;
    let p = t.gather_rows(pos, &positions)?;
    let h = t.add(e, p)?;
    let mut h = t.reshape(h, &[b, len, d.d_m])?;
    for l in 0..d.layers {
        let q = linear(t, s, &name(l, "q"), h)?;
        let k = linear(t, s, &name(l, "k"), h)?;
        let v = linear(t, s, &name(l, "v"), h)?;
        let a = t.attention(q, k, v, d.heads, true)?;
        let o = linear(t, s, &name(l, "o"), a)?;
        let r = t.add(h, o)?;
        h = layer_norm(t, s, &name(l, "ln1"), r)?;
        let q = linear(t, s, &name(l, "cq"), h)?;
        let k = linear(t, s, &name(l, "ck"), memory)?;
        let v = linear(t, s, &name(l, "cv"), memory)?;
        let a = t.attention(q, k, v, d.heads, false)?;
        let o = linear(t, s, &name(l, "co"), a)?;
        let r = t.add(h, o)?;
        h = layer_norm(t, s, &name(l, "ln2"), r)?;
        let f = linear(t, s, &name(l, "ff1"), h)?;
        let f = t.relu(f)?;
        let f = linear(t, s, &name(l, "ff2"), f)?;
        let r = t.add(h, f)?;
        h = layer_norm(t, s, &name(l, "ln3"), r)?;
    }
    let logits = linear(t, s, "dec.out", h)?;
    Ok(t.reshape(logits, &[b * len, d.vocab])?)
}

/// Inputs `seq[..-1]` and targets `seq[1..]`, right-padded with PAD to a common length.
pub fn teacher_forcing(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let len = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0).max(1);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        let mut inp: Vec<usize> = s[..s.len().saturating_sub(1)].to_vec();
        let mut tgt: Vec<usize> = s.get(1..).map_or(Vec::new(), <[usize]>::to_vec);
        inp.resize(len, PAD);
        tgt.resize(len, PAD);
        inputs.push(inp);
        targets.extend(tgt);
    }
    (inputs, targets)
}

/// Mean token NLL over included target positions; PAD targets are always
/// excluded and `PromptMasked` also drops the first `prompt_len` positions of
/// every row. Returns the loss and the number of included positions (the
/// loss is 0 when that is 0).
pub fn nll_loss(t: &mut Tape, logits: Var, targets: &[usize], row_len: usize, mode: MaskMode, prompt_len: usize) -> Result<(Var, usize)> {
    let rows = t.shape(logits)[0];
    if targets.len() != rows || row_len == 0 || !rows.is_multiple_of(row_len) {
        return Err(data_err(format!("{} targets for {rows} logit rows", targets.len())));
    }
    let weights: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(i, &tg)| {
            let masked = tg == PAD || (mode == MaskMode::PromptMasked && i % row_len < prompt_len);
            if masked {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    let count = weights.iter().filter(|&&w| w > 0.0).count();
    let loss = t.softmax_ce(logits, targets, &weights, 0.0, count as f64)?;
    Ok((loss, count))
}

/// `λ_cls · (main + aux) + λ_lm · nll`, skipping absent terms.
pub fn total_objective(t: &mut Tape, main: Var, aux: Option<Var>, nll: Option<Var>, lambda_cls: f64, lambda_lm: f64) -> Result<Var> {
    let mut cls = main;
    if let Some(a) = aux {
        cls = t.add(cls, a)?;
    }
    let mut total = t.scale(cls, lambda_cls)?;
    if let Some(n) = nll {
        let n = t.scale(n, lambda_lm)?;
        total = t.add(total, n)?;
    }
    Ok(total)
}

/// Cached decoding for one sample.
pub struct Infer<'a> {
    s: &'a ParamStore,
    d: DecoderDims,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
    n_mem: usize,
}

#[derive(Clone, Debug)]
pub struct Cache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

fn attend(q: &[f64], k: &[f64], v: &[f64], n_keys: usize, d_m: usize, heads: usize) -> Vec<f64> {
    let dh = d_m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d_m];
    let mut scores = vec![0.0; n_keys];
    for h in 0..heads {
        let off = h * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let kr = &k[j * d_m + off..j * d_m + off + dh];
            *s = q[off..off + dh].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        numcore::kernels::softmax_rows_inplace(&mut scores, n_keys);
        for (j, &w) in scores.iter().enumerate() {
            let vr = &v[j * d_m + off..j * d_m + off + dh];
            out[off..off + dh].iter_mut().zip(vr).for_each(|(o, x)| *o += w * x);
        }
    }
    out
}

impl<'a> Infer<'a> {
    /// `memory` is one sample's fused patches, row-major `[N, d_mem]`.
    pub fn new(s: &'a ParamStore, d: DecoderDims, memory: &[f64]) -> Result<Self> {
        let n_mem = memory.len() / d.d_mem;
        let mut cross_k = Vec::with_capacity(d.layers);
        let mut cross_v = Vec::with_capacity(d.layers);
        for l in 0..d.layers {
            cross_k.push(affine_rows(s, &name(l, "ck"), memory, n_mem)?);
            cross_v.push(affine_rows(s, &name(l, "cv"), memory, n_mem)?);
        }
        Ok(Infer { s, d, cross_k, cross_v, n_mem })
    }

    pub fn empty_cache(&self) -> Cache {
        Cache {
            k: vec![Vec::new(); self.d.layers],
            v: vec![Vec::new(); self.d.layers],
            len: 0,
        }
    }

    /// Feeds one token at the next position and returns the logits there.
    pub fn step(&self, cache: &mut Cache, token: usize) -> Result<Vec<f64>> {
        let d = self.d;
        let s = self.s;
        let pos = cache.len;
        if pos >= d.max_len {
            return Err(data_err(format!("decoding past max_len {}", d.max_len)));
        }
        let tok = s.value("dec.tok")?;
        let pe = s.value("dec.pos")?;
        let mut h: Vec<f64> = tok.row(token).iter().zip(pe.row(pos)).map(|(a, b)| a + b).collect();
        for l in 0..d.layers {
            let q = affine_rows(s, &name(l, "q"), &h, 1)?;
            cache.k[l].extend(affine_rows(s, &name(l, "k"), &h, 1)?);
            cache.v[l].extend(affine_rows(s, &name(l, "v"), &h, 1)?);
            let a = attend(&q, &cache.k[l], &cache.v[l], pos + 1, d.d_m, d.heads);
            let o = affine_rows(s, &name(l, "o"), &a, 1)?;
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            layer_norm_rows(s, &name(l, "ln1"), &mut h)?;
            let q = affine_rows(s, &name(l, "cq"), &h, 1)?;
            let a = attend(&q, &self.cross_k[l], &self.cross_v[l], self.n_mem, d.d_m, d.heads);
            let o = affine_rows(s, &name(l, "co"), &a, 1)?;
            h.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
            layer_norm_rows(s, &name(l, "ln2"), &mut h)?;
            let mut f = affine_rows(s, &name(l, "ff1"), &h, 1)?;
            f.iter_mut().for_each(|x| *x = x.max(0.0));
            let f = affine_rows(s, &name(l, "ff2"), &f, 1)?;
            h.iter_mut().zip(&f).for_each(|(x, y)| *x += y);
            layer_norm_rows(s, &name(l, "ln3"), &mut h)?;
        }
        cache.len += 1;
        affine_rows(s, "dec.out", &h, 1)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = numcore::kernels::log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

struct Beam {
    cache: Cache,
    logits: Vec<f64>,
    logp: f64,
    generated: Vec<usize>,
}

/// Length-normalized beam search (score = total log-probability / generated
/// length, EOS included) from `BOS + prompt`. Returns the prompt followed by
/// the generated tokens, without BOS or EOS. PAD and BOS are never emitted.
pub fn generate(inf: &Infer<'_>, prompt: &[usize], beam_width: usize, max_len: usize) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return Err(config_err("beam width must be at least 1"));
    }
    let max_len = max_len.min(inf.d.max_len);
    if prompt.len() + 1 > max_len {
        return Err(config_err(format!("prompt of {} tokens does not fit max_len {max_len}", prompt.len())));
    }
    let mut cache = inf.empty_cache();
    let mut logits = inf.step(&mut cache, BOS)?;
    for &p in prompt {
        logits = inf.step(&mut cache, p)?;
    }
    let mut alive = vec![Beam { cache, logits, logp: 0.0, generated: Vec::new() }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    let budget = max_len - 1 - prompt.len();
    let mut exhausted = true;
    for _ in 0..budget {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, beam) in alive.iter().enumerate() {
            for (w, lp) in log_softmax(&beam.logits).into_iter().enumerate() {
                if w != PAD && w != BOS {
                    cands.push((beam.logp + lp, bi, w));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam_width);
        for &(score, bi, w) in cands.iter().take(beam_width) {
            let parent = &alive[bi];
            if w == EOS {
                finished.push((score / (parent.generated.len() + 1) as f64, parent.generated.clone()));
                continue;
            }
            let mut generated = parent.generated.clone();
            generated.push(w);
            let mut cache = parent.cache.clone();
            let logits = if cache.len < max_len {
                inf.step(&mut cache, w)?
            } else {
                Vec::new()
            };
            next.push(Beam { cache, logits, logp: score, generated });
        }
        alive = next;
        if finished.len() >= beam_width || alive.is_empty() {
            exhausted = false;
            break;
        }
    }
    if exhausted {
        finished.extend(alive.into_iter().map(|b| (b.logp / b.generated.len().max(1) as f64, b.generated)));
    }
    let mut best: Option<&(f64, Vec<usize>)> = None;
    for f in &finished {
        if best.is_none_or(|b| f.0 > b.0) {
            best = Some(f);
        }
    }
    let mut out = prompt.to_vec();
    if let Some((_, g)) = best {
        out.extend(g);
    }
    Ok(out)
}

/// Logits of every position of `tokens` from the cached path, `[T, vocab]`.
pub fn cached_logits(inf: &Infer<'_>, tokens: &[usize]) -> Result<Tensor> {
    let mut cache = inf.empty_cache();
    let mut data = Vec::with_capacity(tokens.len() * inf.d.vocab);
    for &tk in tokens {
        data.extend(inf.step(&mut cache, tk)?);
    }
    Ok(Tensor::new(vec![tokens.len(), inf.d.vocab], data)?)
}
