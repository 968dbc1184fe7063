//! Two-stage optimization: classifier warm-up, then joint training with the
//! fusion branch and decoder under plateau scheduling and the gate curriculum.

use numcore::{AdamW, Execution, LrGroup, ParamStore, Plateau, Rng, Tape, Var};

use crate::config::{MainLoss, RunConfig};
use crate::datagen::{Dataset, Splits};
use crate::decoder;
use crate::dualcls::{self, AslParams};
use crate::error::Result;
use crate::evalkit::ce_metrics;
use crate::fusion::curriculum_cap;
use crate::model::{Batch, Model, Outputs, Pass};
use crate::tki;

const SHUFFLE_STREAM: u64 = 0x5a17_0001;
const DROPOUT_STREAM: u64 = 0x5a17_0002;
const EVAL_BATCH: usize = 128;

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    /// One line per epoch.
    pub log: Vec<String>,
}

/// Modules trained only in the joint stage.
pub fn joint_only(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("dgsa.") || name.starts_with("gate.")
}

#[derive(Default, Clone, Copy)]
struct LossSums {
    total: f64,
    main: f64,
    aux: f64,
    nll: f64,
    batches: usize,
}

impl LossSums {
    fn mean(&self, v: f64) -> f64 {
        v / self.batches.max(1) as f64
    }
}

/// Loss configuration resolved against the training split.
pub struct Objective {
    focal: Option<(Vec<f64>, f64)>,
    aux: Option<(AslParams, bool)>,
}

impl Objective {
    pub fn new(cfg: &RunConfig, train: &Dataset) -> Self {
        let focal = (cfg.main_loss == MainLoss::Wfl).then(|| {
            let states: Vec<&[_]> = train.samples.iter().map(|s| &s.states[..]).collect();
            (dualcls::wfl_class_weights(&states, cfg.n_nodes), cfg.wfl_gamma)
        });
        Objective { focal, aux: AslParams::for_config(cfg) }
    }

    /// Returns `(main, aux)` loss nodes.
    pub fn classification(&self, t: &mut Tape, out: &Outputs, batch: &Batch) -> Result<(Var, Option<Var>)> {
        let row_w: Option<Vec<f64>> = self.focal.as_ref().map(|(w, _)| {
            let n = w.len() / crate::nodes::N_STATES;
            batch
                .states
                .iter()
                .enumerate()
                .map(|(i, &st)| w[(i % n) * crate::nodes::N_STATES + st as usize])
                .collect()
        });
        let focal = row_w.as_deref().zip(self.focal.as_ref().map(|f| f.1));
        let main = dualcls::main_loss(t, out.main_logits, &batch.states, focal)?;
        let aux = match self.aux {
            Some((a, masked)) => Some(dualcls::binary_loss(
                t,
                out.aux.logits,
                &batch.binary,
                masked.then_some(&batch.mentioned[..]),
                a,
            )?),
            None => None,
        };
        Ok((main, aux))
    }
}

pub struct JointLoss {
    pub total: Var,
    pub main: Var,
    pub aux: Option<Var>,
    pub nll: Var,
}

/// Full objective on one batch: classification terms plus report NLL.
pub fn joint_loss(model: &Model, obj: &Objective, t: &mut Tape, s: &ParamStore, batch: &Batch, pass: Pass<'_>) -> Result<JointLoss> {
    let cfg = &model.cfg;
    let out = model.forward(t, s, batch, Pass { fuse: true, decode: true, ..pass })?;
    let (main, aux) = obj.classification(t, &out, batch)?;
    let logits = out.dec_logits.expect("decoder requested");
    let row_len = batch.dec_inputs[0].len();
    let (nll, _) = decoder::nll_loss(t, logits, &batch.dec_targets, row_len, cfg.mask_mode, cfg.n_nodes)?;
    let total = decoder::total_objective(t, main, aux, Some(nll), cfg.lambda_cls, cfg.lambda_lm)?;
    Ok(JointLoss { total, main, aux, nll })
}

/// Validation micro-F1 under the inference decision rule: thresholds from
/// the grid search on this split when calibration is on, else 0.5.
pub fn val_micro_f1(model: &Model, store: &ParamStore, ds: &Dataset) -> Result<f64> {
    let n = model.n();
    let mut probs = Vec::with_capacity(ds.len() * n);
    let mut labels = Vec::with_capacity(ds.len() * n);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = model.batch(ds, chunk)?;
        let mut t = Tape::new();
        let out = model.forward(&mut t, store, &batch, Pass { rng: None, fuse: false, decode: false, gate_cap: None })?;
        probs.extend(model.decision_probs(&t, &out));
        labels.extend_from_slice(&batch.binary);
    }
    let tau = if model.cfg.ots {
        dualcls::ots(&probs, &labels, n, &model.cfg.ots_grid(), Execution::default())?
    } else {
        vec![0.5; n]
    };
    let pred: Vec<Vec<u8>> = probs.chunks(n).map(|r| r.iter().zip(&tau).map(|(&p, &t)| u8::from(p >= t)).collect()).collect();
    let truth: Vec<Vec<u8>> = labels.chunks(n).map(<[u8]>::to_vec).collect();
    Ok(ce_metrics(&pred, &truth)?.micro.f1)
}

fn lr_line(cfg: &RunConfig, base: f64) -> String {
    LrGroup::ALL
        .iter()
        .map(|&g| format!("lr_{g}={:e}", base * cfg.lr_multiplier(g)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn train(cfg: &RunConfig, splits: &Splits) -> Result<Trained> {
    let model = Model::new(cfg, &splits.train)?;
    let mut store = model.init_params()?;
    let log = train_from(&model, &mut store, splits)?;
    Ok(Trained { model, store, log })
}

/// Runs both stages on an initialized store.
pub fn train_from(model: &Model, store: &mut ParamStore, splits: &Splits) -> Result<Vec<String>> {
    let cfg = &model.cfg;
    let train = &splits.train;
    // Fail on malformed data before any step.
    model.batch(train, &[0])?;
    model.batch(&splits.val, &[0])?;
    let objective = Objective::new(cfg, train);
    let mut shuffle = Rng::new(cfg.seed ^ SHUFFLE_STREAM);
    let mut drop = Rng::new(cfg.seed ^ DROPOUT_STREAM);
    let frozen = |name: &str| cfg.freeze_embeddings && name == tki::H0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();

    let mut opt = AdamW::new(cfg.adamw());
    for epoch in 0..cfg.epochs_stage1 {
        shuffle.shuffle(&mut order);
        let mut sums = LossSums::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = model.batch(train, chunk)?;
            store.zero_grad();
            let mut t = Tape::new();
            let pass = Pass { rng: Some(&mut drop), fuse: false, decode: false, gate_cap: None };
            let out = model.forward(&mut t, store, &batch, pass)?;
            let (main, aux) = objective.classification(&mut t, &out, &batch)?;
            let total = decoder::total_objective(&mut t, main, aux, None, cfg.lambda_cls, cfg.lambda_lm)?;
            sums.main += t.value(main).item();
            sums.aux += aux.map_or(0.0, |a| t.value(a).item());
            sums.total += t.value(total).item();
            sums.batches += 1;
            t.backward_into(total, store)?;
            opt.step(store, |name, g| {
                (!joint_only(name) && !frozen(name)).then(|| cfg.base_lr * cfg.lr_multiplier(g))
            })?;
        }
        let f1 = val_micro_f1(model, store, &splits.val)?;
        log.push(epoch_line(1, epoch, &sums, f1, &lr_line(cfg, cfg.base_lr)));
        log::info!("{}", log[log.len() - 1]);
    }

    let mut opt = AdamW::new(cfg.adamw());
    let mut plateau = Plateau::new(cfg.plateau(), cfg.base_lr)?;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs_stage2 {
        shuffle.shuffle(&mut order);
        let mut sums = LossSums::default();
        let lr = plateau.lr();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = model.batch(train, chunk)?;
            store.zero_grad();
            let mut t = Tape::new();
            let cap = curriculum_cap(step, cfg.curriculum_steps, cfg.curriculum_start);
            let pass = Pass { rng: Some(&mut drop), fuse: true, decode: true, gate_cap: Some(cap) };
            let JointLoss { total, main, aux, nll } = joint_loss(model, &objective, &mut t, store, &batch, pass)?;
            sums.main += t.value(main).item();
            sums.aux += aux.map_or(0.0, |a| t.value(a).item());
            sums.nll += t.value(nll).item();
            sums.total += t.value(total).item();
            sums.batches += 1;
            t.backward_into(total, store)?;
            opt.step(store, |name, g| (!frozen(name)).then(|| lr * cfg.lr_multiplier(g)))?;
            step += 1;
        }
        let f1 = val_micro_f1(model, store, &splits.val)?;
        log.push(epoch_line(2, epoch, &sums, f1, &lr_line(cfg, lr)));
        log::info!("{}", log[log.len() - 1]);
        plateau.observe(f1);
    }
    Ok(log)
}

fn epoch_line(stage: usize, epoch: usize, s: &LossSums, f1: f64, lrs: &str) -> String {
    format!(
        "stage={stage} epoch={epoch} loss={:.6} loss_main={:.6} loss_aux={:.6} loss_nll={:.6} val_micro_f1={f1:.6} {lrs}",
        s.mean(s.total),
        s.mean(s.main),
        s.mean(s.aux),
        s.mean(s.nll),
    )
}

/// Largest relative finite-difference error of the full objective on the
/// first `size` samples of `ds`, probing `per_param` entries per parameter.
/// Dropout and the gate cap are off.
pub fn objective_gradcheck(model: &Model, store: &ParamStore, ds: &Dataset, size: usize, per_param: usize, seed: u64) -> Result<f64> {
    let obj = Objective::new(&model.cfg, ds);
    let idx: Vec<usize> = (0..size.min(ds.len())).collect();
    let batch = model.batch(ds, &idx)?;
    let eval = |s: &ParamStore| -> numcore::Result<(Tape, Var)> {
        let mut t = Tape::new();
        let pass = Pass { rng: None, fuse: true, decode: true, gate_cap: None };
        let l = joint_loss(model, &obj, &mut t, s, &batch, pass)?;
        Ok((t, l.total))
    };
    Ok(numcore::finite_diff_check_sampled(store, 1e-6, per_param, seed, eval)?)
}
