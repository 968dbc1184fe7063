//! Parameter layout and the assembled forward pass.
//!
//! Parameter names are grouped by prefix: `enc.` (encoder group), `dec.`
//! (decoder group), everything else (new modules).

use numcore::{ParamStore, Rng, Tape, Tensor, Var};

use crate::config::{GraphMode, RunConfig};
use crate::datagen::Dataset;
use crate::decoder::{self, DecoderDims, Vocab};
use crate::dualcls::{self, AuxOut};
use crate::error::{data_err, Result};
use crate::fusion;
use crate::graphtopo::{build_adjacency, count_cooccurrence, geometric_normalize, vanilla_adjacency};
use crate::nodes::ClinicalState;
use crate::tki::{self, TkiDims};
use crate::vision;

/// Static structure of a run: config, graph operator and vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    /// Graph operator for the classifier branch; `None` without a graph.
    pub adjacency: Option<Tensor>,
    /// Retained undirected edges of the thresholded graph.
    pub retained_edges: Option<usize>,
    pub vocab: Vocab,
}

/// One minibatch laid out for the tape.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B, N, D_in]`.
    pub features: Tensor,
    /// `[B·n]` state codes.
    pub states: Vec<u8>,
    /// `[B·n]` binary labels.
    pub binary: Vec<u8>,
    /// `[B·n]`, false where the state is BLA.
    pub mentioned: Vec<bool>,
    /// Teacher-forcing decoder inputs (B rows of equal length) and flat targets.
    pub dec_inputs: Vec<Vec<usize>>,
    pub dec_targets: Vec<usize>,
}

/// What to compute in one forward pass.
pub struct Pass<'r> {
    /// Dropout stream; `None` runs in evaluation mode.
    pub rng: Option<&'r mut Rng>,
    /// Run attention fusion (and the decoder when `decode` is set).
    pub fuse: bool,
    pub decode: bool,
    pub gate_cap: Option<f64>,
}

pub struct Outputs {
    pub w: Var,
    pub x: Var,
    pub v_spatial: Var,
    pub main_logits: Var,
    pub aux: AuxOut,
    pub v_fused: Option<Var>,
    pub gate: Option<Var>,
    pub attention: Vec<Var>,
    pub dec_logits: Option<Var>,
}

impl Model {
    /// Builds the graph from the training split's binary labels.
    pub fn new(cfg: &RunConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_nodes;
        let labels: Vec<Vec<u8>> = train
            .samples
            .iter()
            .map(|s| s.binary(cfg.unc_positive)[..n].to_vec())
            .collect();
        let counts = count_cooccurrence(&labels, n)?;
        let (adjacency, retained_edges) = match cfg.graph {
            GraphMode::Tki => {
                let adj = build_adjacency(&geometric_normalize(&counts), cfg.phi)?;
                (Some(adj.a_tilde), Some(adj.retained_edges))
            }
            GraphMode::Vanilla => (Some(vanilla_adjacency(&counts)), None),
            GraphMode::None => (None, None),
        };
        Ok(Model {
            cfg: cfg.clone(),
            adjacency,
            retained_edges,
            vocab: Vocab::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.cfg.n_nodes
    }

    pub fn tki_dims(&self) -> TkiDims {
        TkiDims {
            n: self.cfg.n_nodes,
            d_e: self.cfg.d_e,
            d_g: self.cfg.d_g,
            d_h: self.cfg.d_h,
        }
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            vocab: self.vocab.len(),
            d_m: self.cfg.dec_dim,
            heads: self.cfg.dec_heads,
            layers: self.cfg.dec_layers,
            ffn: self.cfg.dec_ffn,
            max_len: self.cfg.max_len,
            d_mem: self.cfg.dim,
        }
    }

    /// Seeded initialization in a fixed registration order.
    pub fn init_params(&self) -> Result<ParamStore> {
        let c = &self.cfg;
        let mut rng = Rng::new(c.seed);
        let mut s = ParamStore::new();
        vision::init_encoder(&mut s, &mut rng, c.encoder, c.feat_dim, c.dim)?;
        vision::init_dse(&mut s, &mut rng, c.dim, c.d_h, c.se_reduction)?;
        if self.adjacency.is_some() {
            let path = (!c.embeddings_path.is_empty()).then(|| std::path::Path::new(&c.embeddings_path));
            let h0 = tki::load_or_init_embeddings(path, c.d_e, c.seed)?;
            tki::init(&mut s, &mut rng, self.tki_dims(), &h0)?;
        } else {
            dualcls::init_plain_weights(&mut s, &mut rng, c.n_nodes, c.d_h)?;
        }
        dualcls::init_heads(&mut s, &mut rng, c.n_nodes, c.d_h, c.d_f)?;
        if c.dgsa {
            fusion::init_dgsa(&mut s, &mut rng, c.dgsa_blocks, c.dim, c.d_f, c.dgsa_heads)?;
            fusion::init_gate(&mut s, &mut rng, c.dim, c.gate_bias_init)?;
        }
        decoder::init(&mut s, &mut rng, self.decoder_dims())?;
        Ok(s)
    }

    pub fn batch(&self, ds: &Dataset, idx: &[usize]) -> Result<Batch> {
        let c = &self.cfg;
        let n = c.n_nodes;
        if ds.n_patches != c.n_patches || ds.feat_dim != c.feat_dim {
            return Err(data_err(format!(
                "dataset has {}x{} patches, config expects {}x{}",
                ds.n_patches, ds.feat_dim, c.n_patches, c.feat_dim
            )));
        }
        let mut feats = Vec::with_capacity(idx.len() * c.n_patches * c.feat_dim);
        let mut states = Vec::with_capacity(idx.len() * n);
        let mut binary = Vec::with_capacity(idx.len() * n);
        let mut seqs = Vec::with_capacity(idx.len());
        for &i in idx {
            let smp = &ds.samples[i];
            feats.extend(smp.features.iter().map(|&v| v as f64));
            let st = &smp.states[..n];
            states.extend(st.iter().map(|s| s.code()));
            binary.extend(st.iter().map(|s| s.binary(c.unc_positive)));
            seqs.push(self.vocab.sequence(st, &smp.report, c.max_len)?);
        }
        let mentioned = states.iter().map(|&s| s != ClinicalState::Bla.code()).collect();
        let (dec_inputs, dec_targets) = decoder::teacher_forcing(&seqs);
        Ok(Batch {
            size: idx.len(),
            features: Tensor::new(vec![idx.len(), c.n_patches, c.feat_dim], feats)?,
            states,
            binary,
            mentioned,
            dec_inputs,
            dec_targets,
        })
    }

    /// Classifier weight block `[n·4, d_h]`.
    pub fn weights(&self, t: &mut Tape, s: &ParamStore, rng: Option<&mut Rng>) -> Result<Var> {
        match &self.adjacency {
            Some(a) => {
                let adj = t.constant(a.clone())?;
                tki::forward(t, s, adj, self.cfg.tki_dropout, rng)
            }
            None => Ok(t.param(s, dualcls::MAIN_W)?),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, batch: &Batch, pass: Pass<'_>) -> Result<Outputs> {
        let c = &self.cfg;
        let raw = t.constant(batch.features.clone())?;
        let v_spatial = vision::encode(t, s, c.encoder, raw)?;
        let v_global = vision::gap(t, v_spatial)?;
        let x = vision::dse_forward(t, s, v_global, c.dse)?.x;
        let w = self.weights(t, s, pass.rng)?;
        let main_logits = dualcls::main_forward(t, s, x, w)?;
        let aux = dualcls::aux_forward(t, s, x)?;
        let mut out = Outputs {
            w,
            x,
            v_spatial,
            main_logits,
            aux,
            v_fused: None,
            gate: None,
            attention: Vec::new(),
            dec_logits: None,
        };
        if !pass.fuse {
            return Ok(out);
        }
        let v_fused = if c.dgsa {
            let att = fusion::dgsa(t, s, out.aux.f_cond, v_spatial, c.dgsa_heads, c.dgsa_blocks)?;
            let (fused, g) = fusion::gate_fuse(t, s, v_spatial, att.out, pass.gate_cap)?;
            out.gate = Some(g);
            out.attention = att.attention;
            fused
        } else {
            v_spatial
        };
        out.v_fused = Some(v_fused);
        if pass.decode {
            out.dec_logits = Some(decoder::forward(t, s, self.decoder_dims(), &batch.dec_inputs, v_fused)?);
        }
        Ok(out)
    }

    /// Binary probabilities used for decisions: the auxiliary head, or the
    /// main head's positive mass when no auxiliary loss trains it.
    pub fn decision_probs(&self, t: &Tape, out: &Outputs) -> Vec<f64> {
        if dualcls::AslParams::for_config(&self.cfg).is_some() {
            t.value(out.aux.p).data().to_vec()
        } else {
            dualcls::main_head_probs(t.value(out.main_logits).data(), self.cfg.unc_positive)
        }
    }
}

