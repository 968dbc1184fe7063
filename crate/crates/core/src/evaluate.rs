//! Threshold calibration on validation, test-split decisions, report
//! decoding and the full metrics report.

use numcore::{par, Execution, ParamStore, Tape};

use crate::datagen::{Dataset, Splits};
use crate::decoder::{self, Infer, Vocab};
use crate::dualcls;
use crate::error::Result;
use crate::evalkit::{auc, bleu, ce_metrics, complex_subset, rouge_l, MetricsReport};
use crate::fusion;
use crate::model::{Model, Pass};
use crate::nodes::{ClinicalState, N_CORE};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub ots: bool,
    pub beam_width: usize,
    pub dump_attention: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &crate::config::RunConfig) -> Self {
        EvalOptions {
            ots: cfg.ots,
            beam_width: cfg.beam_width,
            dump_attention: false,
        }
    }
}

/// Forward outputs over a whole split.
pub struct Prediction {
    /// `[rows·n]` decision probabilities.
    pub probs: Vec<f64>,
    /// `[rows·n·4]` main-head logits.
    pub main_logits: Vec<f64>,
    /// Per sample `[N·D]` fused patches (empty unless requested).
    pub fused: Vec<Vec<f64>>,
    /// Query-averaged attention of the first batch, `[B][heads][N]`.
    pub attention: Option<Vec<Vec<Vec<f64>>>>,
}

pub fn predict(model: &Model, store: &ParamStore, ds: &Dataset, fuse: bool) -> Result<Prediction> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut pred = Prediction { probs: Vec::new(), main_logits: Vec::new(), fused: Vec::new(), attention: None };
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = model.batch(ds, chunk)?;
        let mut t = Tape::new();
        let out = model.forward(&mut t, store, &batch, Pass { rng: None, fuse, decode: false, gate_cap: None })?;
        pred.probs.extend(model.decision_probs(&t, &out));
        pred.main_logits.extend_from_slice(t.value(out.main_logits).data());
        if let Some(v) = out.v_fused {
            let val = t.value(v);
            let per = val.numel() / chunk.len();
            pred.fused.extend(val.data().chunks(per).map(<[f64]>::to_vec));
        }
        if pred.attention.is_none() {
            if let Some(&a) = out.attention.first() {
                pred.attention = fusion::attention_maps(&t, a);
            }
        }
    }
    Ok(pred)
}

pub struct Evaluation {
    pub metrics: MetricsReport,
    pub tau: Vec<f64>,
    pub decisions: Vec<Vec<u8>>,
    pub prompts: Vec<Vec<ClinicalState>>,
    /// Generated report words (prompt excluded).
    pub reports: Vec<Vec<String>>,
    pub test_probs: Vec<f64>,
    pub attention_csv: Option<String>,
}

impl Evaluation {
    /// One report per line; with `show_prompt` the state tokens lead.
    pub fn reports_text(&self, show_prompt: bool) -> String {
        let mut s = String::new();
        for (r, p) in self.reports.iter().zip(&self.prompts) {
            let mut words: Vec<&str> = Vec::new();
            if show_prompt {
                words.extend(p.iter().map(|st| st.token()));
            }
            words.extend(r.iter().map(String::as_str));
            s.push_str(&words.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn binary_rows(ds: &Dataset, n: usize, unc_positive: bool) -> Vec<Vec<u8>> {
    ds.samples.iter().map(|s| s.binary(unc_positive)[..n].to_vec()).collect()
}

/// Thresholds from validation: grid search, or 0.5 everywhere.
pub fn calibrate(model: &Model, store: &ParamStore, val: &Dataset, ots: bool) -> Result<Vec<f64>> {
    let n = model.n();
    if !ots {
        return Ok(vec![0.5; n]);
    }
    let pred = predict(model, store, val, false)?;
    let labels: Vec<u8> = binary_rows(val, n, model.cfg.unc_positive).concat();
    dualcls::ots(&pred.probs, &labels, n, &model.cfg.ots_grid(), Execution::default())
}

pub fn evaluate(model: &Model, store: &ParamStore, splits: &Splits, opts: EvalOptions) -> Result<Evaluation> {
    let n = model.n();
    let tau = calibrate(model, store, &splits.val, opts.ots)?;
    let test = &splits.test;
    let pred = predict(model, store, test, true)?;
    let (decisions, prompts) = dualcls::decide_and_prompt(&pred.main_logits, &pred.probs, &tau);
    let dims = model.decoder_dims();
    let generated = par::map_range(Execution::default(), test.len(), |i| -> Result<Vec<usize>> {
        let inf = Infer::new(store, dims, &pred.fused[i])?;
        let prompt: Vec<usize> = prompts[i].iter().map(|&s| Vocab::state_id(s)).collect();
        decoder::generate(&inf, &prompt, opts.beam_width, model.cfg.max_len)
    });
    let mut reports = Vec::with_capacity(test.len());
    for g in generated {
        reports.push(model.vocab.words(&g?[n..]));
    }
    let refs: Vec<Vec<String>> = test.samples.iter().map(|s| s.report.clone()).collect();
    let truth = binary_rows(test, n, model.cfg.unc_positive);
    let ce = ce_metrics(&decisions, &truth)?;
    let k = n.min(N_CORE);
    let aucs = (0..k)
        .map(|d| {
            let scores: Vec<f64> = pred.probs.chunks(n).map(|r| r[d]).collect();
            let labels: Vec<u8> = truth.iter().map(|r| r[d]).collect();
            auc(&scores, &labels)
        })
        .collect();
    let cx = complex_subset(&truth);
    let cx_pred: Vec<Vec<u8>> = cx.iter().map(|&i| decisions[i].clone()).collect();
    let cx_truth: Vec<Vec<u8>> = cx.iter().map(|&i| truth[i].clone()).collect();
    let metrics = MetricsReport {
        ce,
        auc: aucs,
        bleu: bleu(&reports, &refs, 4)?,
        rouge_l: rouge_l(&reports, &refs),
        n_reports: reports.len(),
        complex: ce_metrics(&cx_pred, &cx_truth)?,
    };
    let attention_csv = if opts.dump_attention {
        pred.attention.as_deref().map(fusion::attention_csv)
    } else {
        None
    };
    Ok(Evaluation {
        metrics,
        tau,
        decisions,
        prompts,
        reports,
        test_probs: pred.probs,
        attention_csv,
    })
}
