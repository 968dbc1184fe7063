//! Run directories, threshold sweeps and ablation grids.
//!
//! A run directory holds `config.txt` (effective config), `model.ckpt`,
//! `train.log`, and after evaluation `tau.txt`, `metrics.csv`, `reports.txt`
//! and optionally `attention.csv`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numcore::{checkpoint, Execution, ParamStore};

use crate::config::{AuxLoss, GraphMode, MainLoss, MaskMode, RunConfig};
use crate::datagen::{generate_splits, read_splits, Generator, Splits};
use crate::dualcls::tau_text;
use crate::error::{config_err, data_err, Result};
use crate::evaluate::{evaluate, EvalOptions, Evaluation};
use crate::model::Model;
use crate::nodes::N_CORE;
use crate::train::{train, Trained};

pub const CONFIG_FILE: &str = "config.txt";
pub const CKPT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const TAU_FILE: &str = "tau.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORTS_FILE: &str = "reports.txt";
pub const ATTENTION_FILE: &str = "attention.csv";

/// Header of sweep and ablation tables.
pub const TABLE_HEADER: &str = "micro_precision,micro_recall,micro_f1,complex_micro_f1,mean_auc,bleu_1,bleu_4,rouge_l";

pub fn splits_for(cfg: &RunConfig) -> Result<Splits> {
    let gen = Generator::new(cfg.gen_config())?;
    Ok(generate_splits(&gen, [cfg.n_train, cfg.n_val, cfg.n_test], Execution::default()))
}

/// Reads splits and checks they match the configured patch layout.
pub fn load_splits(cfg: &RunConfig, dir: &Path) -> Result<Splits> {
    let s = read_splits(dir)?;
    if s.train.n_patches != cfg.n_patches || s.train.feat_dim != cfg.feat_dim {
        return Err(data_err(format!(
            "{}: data has {}x{} patches, config expects {}x{}",
            dir.display(),
            s.train.n_patches,
            s.train.feat_dim,
            cfg.n_patches,
            cfg.feat_dim
        )));
    }
    if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
        return Err(data_err(format!("{}: every split needs samples", dir.display())));
    }
    Ok(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

pub fn save_run(t: &Trained, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write(&dir.join(CONFIG_FILE), &t.model.cfg.to_text())?;
    checkpoint::save(&t.store, &dir.join(CKPT_FILE))?;
    write(&dir.join(LOG_FILE), &(t.log.join("\n") + "\n"))?;
    Ok(())
}

/// Rebuilds the model from `cfg` and the training split, then loads weights.
pub fn load_run(cfg: &RunConfig, splits: &Splits, dir: &Path) -> Result<(Model, ParamStore)> {
    let model = Model::new(cfg, &splits.train)?;
    let mut store = model.init_params()?;
    let path = dir.join(CKPT_FILE);
    if !path.exists() {
        return Err(data_err(format!("checkpoint {} not found", path.display())));
    }
    checkpoint::load_into(&mut store, &path)?;
    Ok((model, store))
}

pub fn write_evaluation(e: &Evaluation, dir: &Path, show_prompt: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write(&dir.join(TAU_FILE), &tau_text(&e.tau))?;
    write(&dir.join(METRICS_FILE), &e.metrics.to_csv())?;
    write(&dir.join(REPORTS_FILE), &e.reports_text(show_prompt))?;
    if let Some(a) = &e.attention_csv {
        write(&dir.join(ATTENTION_FILE), a)?;
    }
    Ok(())
}

pub struct RunResult {
    pub trained: Trained,
    pub eval: Evaluation,
}

pub fn run(cfg: &RunConfig, splits: &Splits) -> Result<RunResult> {
    let trained = train(cfg, splits)?;
    let eval = evaluate(&trained.model, &trained.store, splits, EvalOptions::from_config(cfg))?;
    Ok(RunResult { trained, eval })
}

fn table_row(e: &Evaluation) -> String {
    let m = &e.metrics;
    let b = |k: usize| m.bleu.get(k).copied().unwrap_or(f64::NAN);
    format!(
        "{},{},{},{},{},{},{},{}",
        m.ce.micro.precision,
        m.ce.micro.recall,
        m.ce.micro.f1,
        m.complex.micro.f1,
        m.mean_auc().unwrap_or(f64::NAN),
        b(0),
        b(3),
        m.rouge_l
    )
}

/// Distinct values in first-seen order; each must lie in [0, 100).
pub fn dedupe_phis(phis: &[f64]) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for &p in phis {
        if !(0.0..100.0).contains(&p) {
            return Err(config_err(format!("phi {p} outside [0, 100)")));
        }
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// One train+evaluate per distinct phi on shared data and seed.
/// Columns: `phi,retained_edges,` then [`TABLE_HEADER`].
pub fn sweep_phi(cfg: &RunConfig, splits: &Splits, phis: &[f64]) -> Result<String> {
    let mut out = format!("phi,retained_edges,{TABLE_HEADER}\n");
    for phi in dedupe_phis(phis)? {
        let c = RunConfig { phi, ..cfg.clone() };
        let r = run(&c, splits)?;
        let edges = r.trained.model.retained_edges.map_or(String::new(), |e| e.to_string());
        out.push_str(&format!("{phi},{edges},{}\n", table_row(&r.eval)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Components,
    Losses,
    PromptMask,
    Topology,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Components, Axis::Losses, Axis::PromptMask, Axis::Topology];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Losses => "losses",
            Axis::PromptMask => "prompt_mask",
            Axis::Topology => "topology",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = crate::CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown ablation axis `{s}`")))
    }
}

/// Trained variants of an axis. Each entry lists the labels evaluated with
/// thresholds fixed at 0.5 and calibrated (either may be absent).
pub struct Variant {
    pub cfg: RunConfig,
    pub fixed_label: Option<String>,
    pub ots_label: Option<String>,
}

pub fn variants(base: &RunConfig, axis: Axis) -> Vec<Variant> {
    let same = |label: &str, cfg: RunConfig| {
        let (fixed, ots) = if cfg.ots { (None, Some(label.to_string())) } else { (Some(label.to_string()), None) };
        Variant { cfg, fixed_label: fixed, ots_label: ots }
    };
    match axis {
        Axis::Components => [
            ("BASE", false, GraphMode::None, false),
            ("DSE+DGSA", true, GraphMode::None, true),
            ("DSE+TKI", true, GraphMode::Tki, false),
            ("DSE+TKI+DGSA", true, GraphMode::Tki, true),
        ]
        .into_iter()
        .map(|(name, dse, graph, dgsa)| {
            let label = if name == "BASE" { "BASE".to_string() } else { format!("BASE+{name}") };
            let ots = if name == "BASE" { "BASE+OTS".to_string() } else { format!("BASE+OTS+{name}") };
            Variant {
                cfg: RunConfig { dse, graph, dgsa, ..base.clone() },
                fixed_label: Some(label),
                ots_label: Some(ots),
            }
        })
        .collect(),
        Axis::Losses => [
            ("CE/none", MainLoss::Ce, AuxLoss::None),
            ("CE/MBCE", MainLoss::Ce, AuxLoss::Mbce),
            ("WFL/MBCE", MainLoss::Wfl, AuxLoss::Mbce),
            ("CE/ASL", MainLoss::Ce, AuxLoss::Asl),
            ("CE/T-ASL", MainLoss::Ce, AuxLoss::Tasl),
        ]
        .into_iter()
        .map(|(l, main_loss, aux_loss)| same(l, RunConfig { main_loss, aux_loss, ..base.clone() }))
        .collect(),
        Axis::PromptMask => [("full", MaskMode::Full), ("prompt_masked", MaskMode::PromptMasked)]
            .into_iter()
            .map(|(l, mask_mode)| same(l, RunConfig { mask_mode, ..base.clone() }))
            .collect(),
        Axis::Topology => [
            ("14-node+vanilla", N_CORE, GraphMode::Vanilla),
            ("14-node+TKI", N_CORE, GraphMode::Tki),
            ("18-node+vanilla", crate::nodes::N_NODES, GraphMode::Vanilla),
            ("18-node+TKI", crate::nodes::N_NODES, GraphMode::Tki),
        ]
        .into_iter()
        .map(|(l, n_nodes, graph)| same(l, RunConfig { n_nodes, graph, ..base.clone() }))
        .collect(),
    }
}

/// Runs every variant of `axis` on shared data; columns `variant,` then [`TABLE_HEADER`].
pub fn ablate(base: &RunConfig, splits: &Splits, axis: Axis) -> Result<String> {
    let mut out = format!("variant,{TABLE_HEADER}\n");
    for v in variants(base, axis) {
        let t = train(&v.cfg, splits)?;
        for (label, ots) in [(&v.fixed_label, false), (&v.ots_label, true)] {
            if let Some(label) = label {
                let opts = EvalOptions { ots, ..EvalOptions::from_config(&v.cfg) };
                let e = evaluate(&t.model, &t.store, splits, opts)?;
                out.push_str(&format!("{label},{}\n", table_row(&e)));
            }
        }
    }
    Ok(out)
}
