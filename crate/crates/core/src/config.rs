//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! Every key is unique across sections so the CLI can expose each one as a
//! flat `--key value` flag. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numcore::{AdamWConfig, LrGroup, PlateauConfig};

use crate::datagen::GenConfig;
use crate::error::{config_err, Result};
use crate::nodes::{ClinicalState, N_CORE, N_NODES};

macro_rules! choice_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident = $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of {:?}", [$($text),+])),
                }
            }
        }
    };
}

choice_enum!(MainLoss { Ce = "ce", Wfl = "wfl" });
choice_enum!(AuxLoss { None = "none", Mbce = "mbce", Asl = "asl", Tasl = "tasl" });
choice_enum!(MaskMode { Full = "full", PromptMasked = "prompt_masked" });
choice_enum!(
    /// `tki`: normalized, thresholded graph; `vanilla`: row-normalized raw
    /// counts; `none`: plain learned classifier weights.
    GraphMode { Tki = "tki", Vanilla = "vanilla", None = "none" }
);
choice_enum!(EncoderMode { Affine = "affine", Identity = "identity" });
choice_enum!(SimSlice { Pos = "pos", Neg = "neg", Bla = "bla", Unc = "unc", All = "all" });

impl SimSlice {
    pub fn states(self) -> Vec<ClinicalState> {
        match self {
            SimSlice::Pos => vec![ClinicalState::Pos],
            SimSlice::Neg => vec![ClinicalState::Neg],
            SimSlice::Bla => vec![ClinicalState::Bla],
            SimSlice::Unc => vec![ClinicalState::Unc],
            SimSlice::All => ClinicalState::ALL.to_vec(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| config_err(format!("bad value `{value}` for `{key}`: {e}")))
}

macro_rules! run_config {
    ($( [$section:ident] $( $key:ident : $ty:ty = $default:expr, $doc:literal; )* )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $( #[doc = $doc] pub $key: $ty, )* )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $( $key: $default, )* )* }
            }
        }

        /// `(section, key, description)` for every configuration key.
        pub const KEYS: &[(&str, &str, &str)] = &[ $( $( (stringify!($section), stringify!($key), $doc), )* )* ];

        impl RunConfig {
            /// Sets one key from its textual value (no validation across keys).
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $( stringify!($key) => self.$key = parse_value::<$ty>(key, value)?, )* )*
                    _ => return Err(config_err(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $( stringify!($key) => Some(self.$key.to_string()), )* )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    [run]
    seed: u64 = 1, "seed for initialization, shuffling and dropout";
    [data]
    data_seed: u64 = 7, "seed of the synthetic generator";
    n_train: usize = 2000, "training samples";
    n_val: usize = 500, "validation samples";
    n_test: usize = 500, "test samples";
    n_patches: usize = 16, "patches per sample";
    feat_dim: usize = 32, "raw feature width per patch";
    support_size: usize = 4, "patches carrying each disease template";
    signal: f64 = 0.5, "per-coordinate std of disease templates";
    noise: f64 = 1.0, "std of additive Gaussian patch noise";
    coupling: f64 = 1.0, "scale of the latent factor loadings";
    eta: f64 = 0.05, "probability a present finding is reported NEG";
    blank_rate: f64 = 0.6, "probability an absent finding is left unmentioned";
    unc_rate: f64 = 0.03, "probability of an uncertain mention";
    unc_positive: bool = false, "count UNC as positive in binary labels";
    [model]
    n_nodes: usize = 18, "graph nodes: 18, or 14 to drop the anatomical attributes";
    encoder: EncoderMode = EncoderMode::Affine, "patch encoder: affine or identity";
    dim: usize = 32, "patch feature width after encoding";
    d_h: usize = 32, "classifier width (also the enhanced feature width)";
    se_reduction: usize = 4, "bottleneck reduction of the channel gate";
    d_f: usize = 32, "width of the auxiliary diagnostic feature";
    dse: bool = true, "enable the channel-gated enhancement";
    graph: GraphMode = GraphMode::Tki, "classifier weights: tki, vanilla or none";
    phi: f64 = 90.0, "percentile threshold for graph edges";
    d_e: usize = 32, "node embedding width";
    d_g: usize = 64, "hidden width of the graph convolution";
    tki_dropout: f64 = 0.1, "dropout after the first graph convolution";
    freeze_embeddings: bool = false, "keep node embeddings fixed";
    embeddings_path: String = String::new(), "optional node embedding file";
    dgsa: bool = true, "enable diagnosis-guided attention and gated fusion";
    dgsa_heads: usize = 4, "attention heads over patches";
    dgsa_blocks: usize = 1, "attention blocks over patches";
    gate_bias_init: f64 = -2.0, "initial bias of the fusion gate output";
    dec_layers: usize = 2, "decoder blocks";
    dec_dim: usize = 64, "decoder width";
    dec_heads: usize = 4, "decoder attention heads";
    dec_ffn: usize = 128, "decoder feed-forward width";
    max_len: usize = 64, "maximum decoder sequence length";
    [loss]
    main_loss: MainLoss = MainLoss::Ce, "main head loss: ce or wfl";
    aux_loss: AuxLoss = AuxLoss::Tasl, "auxiliary loss: none, mbce, asl or tasl";
    gamma_pos: f64 = 0.0, "focusing exponent on positives";
    gamma_neg: f64 = 4.0, "focusing exponent on negatives";
    margin: f64 = 0.05, "probability shift applied to negatives";
    clamp_delta: f64 = 0.05, "probability clamp of the truncated loss";
    wfl_gamma: f64 = 2.0, "focusing exponent of the weighted focal loss";
    lambda_cls: f64 = 1.0, "weight of the classification losses";
    lambda_lm: f64 = 1.0, "weight of the report likelihood";
    mask_mode: MaskMode = MaskMode::Full, "report supervision: full or prompt_masked";
    [train]
    batch_size: usize = 32, "samples per step";
    epochs_stage1: usize = 15, "classifier warm-up epochs";
    epochs_stage2: usize = 15, "joint training epochs";
    base_lr: f64 = 1e-3, "base learning rate";
    lr_encoder: f64 = 0.1, "multiplier for the encoder group";
    lr_new_modules: f64 = 1.0, "multiplier for freshly initialized modules";
    lr_decoder: f64 = 0.5, "multiplier for the decoder group";
    beta1: f64 = 0.9, "AdamW first moment decay";
    beta2: f64 = 0.999, "AdamW second moment decay";
    adam_eps: f64 = 1e-8, "AdamW denominator epsilon";
    weight_decay: f64 = 0.01, "AdamW decoupled weight decay";
    plateau_factor: f64 = 0.5, "lr factor applied on a plateau";
    plateau_patience: usize = 2, "stalled evaluations before reducing";
    min_lr: f64 = 1e-6, "lower bound of the scheduled lr";
    curriculum_steps: usize = 500, "joint steps over which the gate cap reaches 1";
    curriculum_start: f64 = 0.2, "initial gate cap";
    [eval]
    ots: bool = true, "calibrate per-class thresholds on validation";
    ots_step: f64 = 0.05, "threshold grid spacing";
    beam_width: usize = 3, "beam width for report decoding";
    sim_slice: SimSlice = SimSlice::Pos, "state slice for topology similarity";
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(config_err(m));
        if self.n_nodes != N_NODES && self.n_nodes != N_CORE {
            return fail(format!("n_nodes must be {N_NODES} or {N_CORE}, got {}", self.n_nodes));
        }
        if !(0.0..100.0).contains(&self.phi) {
            return fail(format!("phi {} outside [0, 100)", self.phi));
        }
        if self.se_reduction == 0 || !self.d_h.is_multiple_of(self.se_reduction) {
            return fail(format!("d_h {} not divisible by se_reduction {}", self.d_h, self.se_reduction));
        }
        if self.dgsa_heads == 0 || !self.dim.is_multiple_of(self.dgsa_heads) {
            return fail(format!("dim {} not divisible by dgsa_heads {}", self.dim, self.dgsa_heads));
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return fail(format!("dec_dim {} not divisible by dec_heads {}", self.dec_dim, self.dec_heads));
        }
        if self.encoder == EncoderMode::Identity && self.feat_dim != self.dim {
            return fail(format!("identity encoder needs feat_dim == dim ({} vs {})", self.feat_dim, self.dim));
        }
        if self.max_len < self.n_nodes + 2 {
            return fail(format!("max_len {} cannot hold the prompt", self.max_len));
        }
        for (k, v) in [("tki_dropout", self.tki_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{k} {v} outside [0,1)"));
            }
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return fail(format!("margin {} outside [0,1)", self.margin));
        }
        if !(self.clamp_delta >= 0.0 && self.clamp_delta < 0.5) {
            return fail(format!("clamp_delta {} outside [0,0.5)", self.clamp_delta));
        }
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 || self.wfl_gamma < 0.0 {
            return fail("focusing exponents must be >= 0".into());
        }
        if !(self.ots_step > 0.0 && self.ots_step < 0.5) {
            return fail(format!("ots_step {} outside (0, 0.5)", self.ots_step));
        }
        if self.batch_size == 0 || self.beam_width == 0 || self.dgsa_blocks == 0 || self.dec_layers == 0 {
            return fail("batch_size, beam_width, dgsa_blocks and dec_layers must be >= 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_patience == 0 {
            return fail("plateau_factor must be in (0,1) and plateau_patience >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.curriculum_start) {
            return fail(format!("curriculum_start {} outside [0,1]", self.curriculum_start));
        }
        for (k, v) in [
            ("base_lr", self.base_lr),
            ("lr_encoder", self.lr_encoder),
            ("lr_new_modules", self.lr_new_modules),
            ("lr_decoder", self.lr_decoder),
        ] {
            if v < 0.0 {
                return fail(format!("{k} must be >= 0"));
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail("every split needs at least one sample".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (sec, key, doc) in KEYS {
            if *sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).unwrap()));
        }
        out
    }

    /// Parses config text over the defaults. Keys must sit under their own section.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _, _)| *s == name) {
                    return Err(config_err(format!("line {}: unknown section [{name}]", i + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            match KEYS.iter().find(|(_, k, _)| *k == key) {
                None => return Err(config_err(format!("line {}: unknown key `{key}`", i + 1))),
                Some((s, _, _)) => {
                    if let Some(cur) = &section {
                        if cur != s {
                            return Err(config_err(format!("line {}: key `{key}` belongs to [{s}], not [{cur}]", i + 1)));
                        }
                    }
                }
            }
            self.set(key, value)
                .map_err(|e| config_err(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.data_seed,
            coupling: self.coupling,
            eta: self.eta,
            blank_rate: self.blank_rate,
            unc_rate: self.unc_rate,
            n_patches: self.n_patches,
            feat_dim: self.feat_dim,
            support_size: self.support_size,
            signal: self.signal,
            noise: self.noise,
            ..GenConfig::default()
        }
    }

    pub fn lr_multiplier(&self, g: LrGroup) -> f64 {
        match g {
            LrGroup::Encoder => self.lr_encoder,
            LrGroup::NewModules => self.lr_new_modules,
            LrGroup::Decoder => self.lr_decoder,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            min_lr: self.min_lr,
        }
    }

    /// Threshold grid `step, 2·step, …` strictly inside (0, 1).
    pub fn ots_grid(&self) -> Vec<f64> {
        let n = (1.0 / self.ots_step).round() as usize;
        (1..n).map(|i| (i as f64 * self.ots_step * 1e9).round() / 1e9).filter(|&v| v < 1.0).collect()
    }

    /// Small dims for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        RunConfig {
            n_train: 48,
            n_val: 24,
            n_test: 24,
            n_patches: 4,
            feat_dim: 8,
            dim: 8,
            d_h: 8,
            d_f: 8,
            d_e: 6,
            d_g: 8,
            dgsa_heads: 2,
            dec_dim: 8,
            dec_heads: 2,
            dec_ffn: 16,
            dec_layers: 1,
            batch_size: 8,
            epochs_stage1: 1,
            epochs_stage2: 1,
            ..RunConfig::default()
        }
    }
}
