//! Patch encoder, global pooling and the channel-gated enhancement block.

use numcore::{LrGroup, ParamStore, Rng, Tape, Var};

use crate::config::EncoderMode;
use crate::error::{config_err, Result};
use crate::layers::{init_linear, linear};

pub const ENCODER: &str = "enc.patch";
pub const DSE_PROJ: &str = "dse.proj";
pub const DSE_SQUEEZE: &str = "dse.a1";
pub const DSE_EXCITE: &str = "dse.a2";

pub fn init_encoder(s: &mut ParamStore, rng: &mut Rng, mode: EncoderMode, d_in: usize, d: usize) -> Result<()> {
    match mode {
        EncoderMode::Affine => init_linear(s, rng, ENCODER, d_in, d, LrGroup::Encoder),
        EncoderMode::Identity if d_in == d => Ok(()),
        EncoderMode::Identity => Err(config_err(format!("identity encoder needs matching widths ({d_in} vs {d})"))),
    }
}

/// `[B, N, D_in]` raw patches to `[B, N, D]` with one affine map shared by all patches.
pub fn encode(t: &mut Tape, s: &ParamStore, mode: EncoderMode, raw: Var) -> Result<Var> {
    match mode {
        EncoderMode::Affine => linear(t, s, ENCODER, raw),
        EncoderMode::Identity => Ok(raw),
    }
}

pub fn gap(t: &mut Tape, v_spatial: Var) -> Result<Var> {
    Ok(t.mean_mid(v_spatial)?)
}

pub fn init_dse(s: &mut ParamStore, rng: &mut Rng, d: usize, d_x: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !d_x.is_multiple_of(reduction) {
        return Err(config_err(format!("width {d_x} not divisible by reduction {reduction}")));
    }
    init_linear(s, rng, DSE_PROJ, d, d_x, LrGroup::NewModules)?;
    init_linear(s, rng, DSE_SQUEEZE, d_x, d_x / reduction, LrGroup::NewModules)?;
    init_linear(s, rng, DSE_EXCITE, d_x / reduction, d_x, LrGroup::NewModules)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    pub x: Var,
    pub v_proj: Var,
    /// Channel gates in (0, 1); absent when the gate is disabled.
    pub w_c: Option<Var>,
}

/// `x = v_proj + v_proj ⊙ sigmoid(A2·relu(A1·v_proj))`, or `x = v_proj` when disabled.
pub fn dse_forward(t: &mut Tape, s: &ParamStore, v_global: Var, enabled: bool) -> Result<Enhanced> {
    let v_proj = linear(t, s, DSE_PROJ, v_global)?;
    if !enabled {
        return Ok(Enhanced { x: v_proj, v_proj, w_c: None });
    }
    let h = linear(t, s, DSE_SQUEEZE, v_proj)?;
    let h = t.relu(h)?;
    let pre = linear(t, s, DSE_EXCITE, h)?;
    let w_c = t.sigmoid(pre)?;
    let scaled = t.mul(v_proj, w_c)?;
    let x = t.add(v_proj, scaled)?;
    Ok(Enhanced { x, v_proj, w_c: Some(w_c) })
}
