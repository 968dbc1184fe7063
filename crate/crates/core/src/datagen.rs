//! Synthetic long-tailed multi-label data with planted co-occurrence.
//!
//! Labels come from a latent-factor logistic model: `z ~ N(0, I_k)` and
//! disease `d` is present when `sigmoid(A_d·z + b_d) > u_d`. The biases are
//! solved so each disease hits its configured prevalence. Observed clinical
//! states add label noise, blanks and uncertain mentions on top of the clean
//! labels, while the patch features are always rendered from the clean ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use numcore::{par, Execution, Rng};

use crate::error::{data_err, CoreError, Result};
use crate::nodes::{disease_index, ClinicalState, DISEASES, N_NODES};

pub const MAGIC: &str = "GDMRG1";
pub const N_FACTORS: usize = 4;

/// Planted pair sharing a strong common factor.
pub const COMORBID_PAIR: (usize, usize) = (2, 10);
/// Planted pair with opposite loadings on the same factor.
pub const EXCLUSIVE_PAIR: (usize, usize) = (2, 9);

const DEFAULT_PREVALENCE: [f64; N_NODES] = [
    0.12, 0.08, 0.22, 0.28, 0.03, 0.15, 0.05, 0.06, 0.20, 0.04, 0.25, 0.01, 0.02, 0.30, 0.10, 0.05, 0.04, 0.06,
];

// Factors: cardiac, parenchymal, devices/skeletal, anatomical.
const DEFAULT_LOADINGS: [[f64; N_FACTORS]; N_NODES] = [
    [-2.0, -2.0, 0.0, 0.0],
    [1.5, 0.0, 0.0, 1.0],
    [2.5, 0.0, 0.0, 0.0],
    [0.0, 2.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [1.5, 0.0, 0.0, 0.0],
    [0.0, 2.0, 0.0, 0.0],
    [0.0, 2.0, 0.0, 0.0],
    [1.5, 0.0, 0.0, 0.0],
    [-3.0, 0.0, 0.0, 0.0],
    [2.5, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 1.5, 0.0],
    [0.0, 0.0, 1.5, 0.0],
    [0.0, 0.0, 0.0, 1.5],
    [0.0, 0.0, 2.0, 0.0],
    [0.0, 0.0, 0.0, 1.5],
    [0.0, 0.0, 0.0, 1.5],
];

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub prevalence: [f64; N_NODES],
    pub loadings: [[f64; N_FACTORS]; N_NODES],
    /// Multiplies every loading; 0 makes diseases independent.
    pub coupling: f64,
    /// Probability that a present disease is reported as NEG.
    pub eta: f64,
    /// Probability that an absent disease is left unmentioned (BLA) rather than NEG.
    pub blank_rate: f64,
    pub unc_rate: f64,
    pub n_patches: usize,
    pub feat_dim: usize,
    pub support_size: usize,
    /// Per-coordinate std of the disease templates.
    pub signal: f64,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            prevalence: DEFAULT_PREVALENCE,
            loadings: DEFAULT_LOADINGS,
            coupling: 1.0,
            eta: 0.05,
            blank_rate: 0.6,
            unc_rate: 0.03,
            n_patches: 16,
            feat_dim: 32,
            support_size: 4,
            signal: 1.0,
            noise: 1.0,
        }
    }
}

/// Generator state derived from a [`GenConfig`]: solved biases, templates
/// and patch supports.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GenConfig,
    pub bias: [f64; N_NODES],
    pub templates: Vec<Vec<f64>>,
    pub supports: Vec<Vec<usize>>,
}

/// `E[sigmoid(s + b)]` for `s ~ N(0, var)`, by trapezoid quadrature.
fn mean_sigmoid(b: f64, var: f64) -> f64 {
    if var == 0.0 {
        return numcore::kernels::sigmoid(b);
    }
    let sd = var.sqrt();
    let steps = 2000;
    let lo = -9.0;
    let h = 18.0 / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let t = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc += w * (-0.5 * t * t).exp() * numcore::kernels::sigmoid(b + sd * t);
    }
    acc * h / (2.0 * std::f64::consts::PI).sqrt()
}

/// Bias giving marginal prevalence `p` under loading variance `var`.
pub fn solve_bias(p: f64, var: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_sigmoid(mid, var) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl Generator {
    pub fn new(config: GenConfig) -> Result<Self> {
        if let Some(p) = config.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(CoreError::Config(format!("prevalence {p} outside (0,1)")));
        }
        for (name, r) in [("eta", config.eta), ("blank_rate", config.blank_rate), ("unc_rate", config.unc_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CoreError::Config(format!("{name} {r} outside [0,1]")));
            }
        }
        if config.support_size == 0 || config.support_size > config.n_patches {
            return Err(CoreError::Config(format!(
                "support_size {} must be in 1..={}",
                config.support_size, config.n_patches
            )));
        }
        let mut bias = [0.0; N_NODES];
        for d in 0..N_NODES {
            let var: f64 = config.loadings[d].iter().map(|a| (a * config.coupling).powi(2)).sum();
            bias[d] = solve_bias(config.prevalence[d], var);
        }
        let mut templates = Vec::with_capacity(N_NODES);
        let mut supports = Vec::with_capacity(N_NODES);
        for d in 0..N_NODES {
            let mut rng = Rng::stream(config.seed ^ 0x7e3a_11c5, d as u64);
            templates.push((0..config.feat_dim).map(|_| config.signal * rng.normal()).collect());
            let mut s = rng.choose_distinct(config.n_patches, config.support_size);
            s.sort_unstable();
            supports.push(s);
        }
        Ok(Generator { config, bias, templates, supports })
    }

    pub fn n_diseases(&self) -> usize {
        N_NODES
    }

    /// Marginal probability that the observed state is POS.
    pub fn observed_prevalence(&self, d: usize) -> f64 {
        let c = &self.config;
        c.prevalence[d] * (1.0 - c.eta) * (1.0 - c.unc_rate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDraw {
    pub clean: Vec<u8>,
    pub states: Vec<ClinicalState>,
}

impl LabelDraw {
    pub fn binary(&self, unc_positive: bool) -> Vec<u8> {
        self.states.iter().map(|s| s.binary(unc_positive)).collect()
    }
}

pub fn sample_labels(gen: &Generator, rng: &mut Rng) -> LabelDraw {
    let c = &gen.config;
    let z: Vec<f64> = (0..N_FACTORS).map(|_| rng.normal()).collect();
    let mut clean = vec![0u8; N_NODES];
    let mut states = vec![ClinicalState::Bla; N_NODES];
    for d in 0..N_NODES {
        let s: f64 = c.loadings[d].iter().zip(&z).map(|(a, zi)| a * c.coupling * zi).sum();
        let u = rng.uniform();
        let y = numcore::kernels::sigmoid(s + gen.bias[d]) > u;
        let flip = rng.uniform();
        let unc = rng.uniform();
        clean[d] = y as u8;
        let mut st = if y {
            if flip < c.eta {
                ClinicalState::Neg
            } else {
                ClinicalState::Pos
            }
        } else if flip < c.blank_rate {
            ClinicalState::Bla
        } else {
            ClinicalState::Neg
        };
        if unc < c.unc_rate {
            st = ClinicalState::Unc;
        }
        states[d] = st;
    }
    LabelDraw { clean, states }
}

/// Patch features `[n_patches][feat_dim]` from clean labels, rounded to f32.
pub fn render_features(clean: &[u8], gen: &Generator, rng: &mut Rng) -> Vec<f32> {
    let c = &gen.config;
    let (np, fd) = (c.n_patches, c.feat_dim);
    let mut x = vec![0.0f64; np * fd];
    for (d, &y) in clean.iter().enumerate() {
        if y == 1 {
            for &p in &gen.supports[d] {
                for j in 0..fd {
                    x[p * fd + j] += gen.templates[d][j];
                }
            }
        }
    }
    x.iter().map(|v| (v + c.noise * rng.normal()) as f32).collect()
}

/// Clause spoken for a positive finding, one per node.
pub const POS_CLAUSES: [&str; N_NODES] = [
    "no acute cardiopulmonary abnormality seen",
    "the cardiomediastinal silhouette is enlarged",
    "the heart size is enlarged",
    "there is patchy lung opacity",
    "a focal pulmonary nodule is noted",
    "mild pulmonary edema is present",
    "there is focal consolidation",
    "findings suggest superimposed pneumonia",
    "bibasilar atelectasis is noted",
    "there is a small pneumothorax",
    "small bilateral pleural effusions are present",
    "pleural thickening is seen",
    "an old rib fracture is noted",
    "support lines and tubes are present",
    "the aorta is tortuous",
    "degenerative changes of the spine",
    "the right hemidiaphragm is elevated",
    "lung volumes are low",
];

/// Diseases whose NEG state is spoken, with their clauses.
pub const NEG_CLAUSES: [(usize, &str); 4] = [
    (2, "heart size is normal"),
    (3, "no focal airspace opacity"),
    (5, "no pulmonary edema"),
    (10, "no pleural effusion"),
];

pub const NORMAL_SUMMARY: &str = "the lungs are clear";
pub const CLAUSE_END: &str = ".";

/// Deterministic template report: normal summary if nothing is POS, then in
/// node order a clause per POS finding and per spoken NEG finding.
pub fn render_report(states: &[ClinicalState]) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |clause: &str| {
        words.extend(clause.split(' ').map(str::to_string));
        words.push(CLAUSE_END.to_string());
    };
    if !states.contains(&ClinicalState::Pos) {
        push(NORMAL_SUMMARY);
    }
    for (d, st) in states.iter().enumerate() {
        match st {
            ClinicalState::Pos => push(POS_CLAUSES[d]),
            ClinicalState::Neg => {
                if let Some((_, c)) = NEG_CLAUSES.iter().find(|(i, _)| *i == d) {
                    push(c);
                }
            }
            _ => {}
        }
    }
    words
}

/// Every word the templates can emit, sorted and deduplicated.
pub fn report_words() -> Vec<String> {
    let mut w: Vec<String> = POS_CLAUSES
        .iter()
        .copied()
        .chain(NEG_CLAUSES.iter().map(|(_, c)| *c))
        .chain([NORMAL_SUMMARY])
        .flat_map(|c| c.split(' '))
        .chain([CLAUSE_END])
        .map(str::to_string)
        .collect();
    w.sort();
    w.dedup();
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub states: Vec<ClinicalState>,
    /// Row-major `[n_patches][feat_dim]`.
    pub features: Vec<f32>,
    pub report: Vec<String>,
}

impl Sample {
    pub fn binary(&self, unc_positive: bool) -> Vec<u8> {
        self.states.iter().map(|s| s.binary(unc_positive)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_patches: usize,
    pub feat_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn binary(&self, unc_positive: bool) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.binary(unc_positive)).collect()
    }
}

pub fn generate_sample(gen: &Generator, id: u64) -> Sample {
    let mut rng = Rng::stream(gen.config.seed, id);
    let labels = sample_labels(gen, &mut rng);
    let features = render_features(&labels.clean, gen, &mut rng);
    let report = render_report(&labels.states);
    Sample {
        id,
        states: labels.states,
        features,
        report,
    }
}

/// Samples with ids `first_id..first_id + n`; order independent of execution.
pub fn generate(gen: &Generator, first_id: u64, n: usize, exec: Execution) -> Dataset {
    let samples = par::map_range(exec, n, |i| generate_sample(gen, first_id + i as u64));
    Dataset {
        n_patches: gen.config.n_patches,
        feat_dim: gen.config.feat_dim,
        samples,
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = format!(
        "magic={MAGIC}\nn_samples={}\nn_patches={}\nfeat_dim={}\nn_diseases={N_NODES}\n",
        ds.len(),
        ds.n_patches,
        ds.feat_dim
    );
    for d in DISEASES {
        meta.push_str(d);
        meta.push('\n');
    }
    fs::write(dir.join("dataset.meta"), meta)?;

    let mut labels = String::from("id");
    for d in DISEASES {
        labels.push(',');
        labels.push_str(d);
    }
    labels.push('\n');
    let mut feats = Vec::with_capacity(ds.len() * ds.n_patches * ds.feat_dim * 4);
    let mut reports = String::new();
    for s in &ds.samples {
        if s.features.len() != ds.n_patches * ds.feat_dim {
            return Err(data_err(format!("sample {} has {} feature values", s.id, s.features.len())));
        }
        let _ = write!(labels, "{}", s.id);
        for st in &s.states {
            let _ = write!(labels, ",{}", st.code());
        }
        labels.push('\n');
        for v in &s.features {
            feats.extend_from_slice(&v.to_le_bytes());
        }
        reports.push_str(&s.report.join(" "));
        reports.push('\n');
    }
    fs::write(dir.join("labels.csv"), labels)?;
    fs::write(dir.join("features.bin"), feats)?;
    fs::write(dir.join("reports.txt"), reports)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn meta_value(meta: &str, key: &str, line_no: usize) -> Result<usize> {
    let line = meta
        .lines()
        .nth(line_no)
        .ok_or_else(|| data_err(format!("dataset.meta: missing `{key}` on line {}", line_no + 1)))?;
    line.strip_prefix(&format!("{key}="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| data_err(format!("dataset.meta line {}: expected `{key}=<integer>`, got `{line}`", line_no + 1)))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_text(&dir.join("dataset.meta"))?;
    let first = meta.lines().next().unwrap_or("");
    if first.trim() != format!("magic={MAGIC}") {
        return Err(data_err(format!(
            "dataset.meta byte 0: magic mismatch, expected `magic={MAGIC}`, found `{first}`"
        )));
    }
    let n = meta_value(&meta, "n_samples", 1)?;
    let np = meta_value(&meta, "n_patches", 2)?;
    let fd = meta_value(&meta, "feat_dim", 3)?;
    let nd = meta_value(&meta, "n_diseases", 4)?;
    if nd != N_NODES {
        return Err(data_err(format!("dataset.meta: n_diseases={nd}, expected {N_NODES}")));
    }
    for (i, line) in meta.lines().skip(5).enumerate() {
        if disease_index(line.trim()) != Some(i) {
            return Err(data_err(format!("dataset.meta line {}: expected disease `{}`", i + 6, DISEASES.get(i).unwrap_or(&"<none>"))));
        }
    }

    let labels = read_text(&dir.join("labels.csv"))?;
    let mut rows = Vec::with_capacity(n);
    for (i, line) in labels.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let id: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| data_err(format!("labels.csv line {}: bad id", i + 1)))?;
        let states: Vec<ClinicalState> = parts
            .map(|v| v.trim().parse::<u8>().ok().and_then(ClinicalState::from_code))
            .collect::<Option<_>>()
            .ok_or_else(|| data_err(format!("labels.csv line {}: bad state code", i + 1)))?;
        if states.len() != N_NODES {
            return Err(data_err(format!("labels.csv line {}: {} states, expected {N_NODES}", i + 1, states.len())));
        }
        rows.push((id, states));
    }
    if rows.len() != n {
        return Err(data_err(format!("labels.csv holds {} rows, dataset.meta declares {n}", rows.len())));
    }

    let bytes = fs::read(dir.join("features.bin")).map_err(|e| data_err(format!("features.bin: {e}")))?;
    let per = np * fd;
    let want = n * per * 4;
    if bytes.len() < want {
        let sample = bytes.len() / (per * 4).max(1);
        return Err(data_err(format!(
            "features.bin truncated at byte offset {} (sample {sample}), expected {want} bytes",
            bytes.len()
        )));
    }
    if bytes.len() > want {
        return Err(data_err(format!(
            "features.bin has {} trailing bytes after offset {want}",
            bytes.len() - want
        )));
    }

    let reports = read_text(&dir.join("reports.txt"))?;
    let report_lines: Vec<&str> = reports.lines().collect();
    if report_lines.len() != n {
        return Err(data_err(format!(
            "reports.txt holds {} lines, dataset.meta declares {n}",
            report_lines.len()
        )));
    }

    let samples = rows
        .into_iter()
        .zip(report_lines)
        .enumerate()
        .map(|(i, ((id, states), rep))| {
            let features = bytes[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let report = rep.split_whitespace().map(str::to_string).collect();
            Sample { id, states, features, report }
        })
        .collect();
    Ok(Dataset {
        n_patches: np,
        feat_dim: fd,
        samples,
    })
}

/// Train/validation/test splits stored under one root directory.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn generate_splits(gen: &Generator, sizes: [usize; 3], exec: Execution) -> Splits {
    let [a, b, c] = sizes;
    Splits {
        train: generate(gen, 0, a, exec),
        val: generate(gen, a as u64, b, exec),
        test: generate(gen, (a + b) as u64, c, exec),
    }
}

pub fn write_splits(splits: &Splits, root: &Path) -> Result<()> {
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        write_dataset(ds, &split_dir(root, name))?;
    }
    Ok(())
}

pub fn read_splits(root: &Path) -> Result<Splits> {
    let read = |s: &str| {
        let dir = split_dir(root, s);
        if !dir.join("dataset.meta").exists() {
            return Err(data_err(format!("split `{s}` missing under {}", root.display())));
        }
        read_dataset(&dir)
    };
    Ok(Splits {
        train: read("train")?,
        val: read("val")?,
        test: read("test")?,
    })
}

/// Mean over patches: `[feat_dim]` per sample.
pub fn pooled_features(s: &Sample, n_patches: usize, feat_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; feat_dim];
    for p in 0..n_patches {
        for j in 0..feat_dim {
            out[j] += s.features[p * feat_dim + j] as f64;
        }
    }
    out.iter_mut().for_each(|v| *v /= n_patches as f64);
    out
}

/// Per-disease AUC of a logistic probe on pooled features, fit on `train`
/// and scored on `held_out` against clean-feature-bearing observed labels.
/// `None` where the held-out labels are degenerate.
pub fn linear_probe_auc(train: &Dataset, held_out: &Dataset) -> Vec<Option<f64>> {
    let (np, fd) = (train.n_patches, train.feat_dim);
    let xs: Vec<Vec<f64>> = train.samples.iter().map(|s| pooled_features(s, np, fd)).collect();
    let xt: Vec<Vec<f64>> = held_out.samples.iter().map(|s| pooled_features(s, np, fd)).collect();
    let n = xs.len().max(1) as f64;
    let mean: Vec<f64> = (0..fd).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..fd)
        .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z = |x: &Vec<f64>| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(z).collect();
    let xt: Vec<Vec<f64>> = xt.iter().map(z).collect();
    let ys = train.binary(false);
    let yt = held_out.binary(false);
    (0..N_NODES)
        .map(|d| {
            let mut w = vec![0.0; fd];
            let mut b = 0.0;
            for _ in 0..300 {
                let mut gw = vec![0.0; fd];
                let mut gb = 0.0;
                for (x, y) in xs.iter().zip(&ys) {
                    let p = numcore::kernels::sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
                    let e = p - y[d] as f64;
                    gb += e;
                    gw.iter_mut().zip(x).for_each(|(g, xv)| *g += e * xv);
                }
                b -= gb / n;
                w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= g / n);
            }
            let scores: Vec<f64> = xt.iter().map(|x| b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()).collect();
            let labels: Vec<u8> = yt.iter().map(|y| y[d]).collect();
            crate::evalkit::auc(&scores, &labels)
        })
        .collect()
}

/// Key=value description of the generator, including the planted pairs.
pub fn manifest(gen: &Generator, sizes: [usize; 3], probe: &[Option<f64>]) -> String {
    let c = &gen.config;
    let mut s = String::new();
    let _ = writeln!(s, "magic={MAGIC}");
    let _ = writeln!(s, "seed={}", c.seed);
    let _ = writeln!(s, "n_train={}\nn_val={}\nn_test={}", sizes[0], sizes[1], sizes[2]);
    let _ = writeln!(s, "n_patches={}\nfeat_dim={}\nsupport_size={}", c.n_patches, c.feat_dim, c.support_size);
    let _ = writeln!(s, "signal={}\nnoise={}\ncoupling={}", c.signal, c.noise, c.coupling);
    let _ = writeln!(s, "eta={}\nblank_rate={}\nunc_rate={}", c.eta, c.blank_rate, c.unc_rate);
    let _ = writeln!(s, "comorbid_pair={},{}", DISEASES[COMORBID_PAIR.0], DISEASES[COMORBID_PAIR.1]);
    let _ = writeln!(s, "exclusive_pair={},{}", DISEASES[EXCLUSIVE_PAIR.0], DISEASES[EXCLUSIVE_PAIR.1]);
    for d in 0..N_NODES {
        let auc = probe.get(d).copied().flatten().map_or("undefined".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            s,
            "disease.{d}={}|prevalence={}|bias={:.6}|loadings={:?}|support={:?}|probe_auc={auc}",
            DISEASES[d], c.prevalence[d], gen.bias[d], c.loadings[d], gen.supports[d]
        );
    }
    s
}
