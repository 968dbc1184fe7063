//! Parameter registration and application for affine maps and layer norms.
//! An affine map `name` owns `name.w` (`[in, out]`) and `name.b` (`[out]`).

use numcore::{LrGroup, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::Result;

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).unwrap()
}

/// Glorot-normal weights, zero bias.
pub fn init_linear(s: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize, group: LrGroup) -> Result<()> {
    let std = (2.0 / (din + dout) as f64).sqrt();
    s.insert(format!("{name}.w"), normal_tensor(rng, &[din, dout], std), group)?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[dout]), group)?;
    Ok(())
}

pub fn init_layer_norm(s: &mut ParamStore, name: &str, d: usize, group: LrGroup) -> Result<()> {
    s.insert(format!("{name}.g"), Tensor::full(&[d], 1.0), group)?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[d]), group)?;
    Ok(())
}

pub fn linear(t: &mut Tape, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = t.param(s, &format!("{name}.w"))?;
    let b = t.param(s, &format!("{name}.b"))?;
    Ok(t.linear(x, w, Some(b))?)
}

pub fn layer_norm(t: &mut Tape, s: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = t.param(s, &format!("{name}.g"))?;
    let b = t.param(s, &format!("{name}.b"))?;
    Ok(t.layer_norm(x, g, b)?)
}

/// `x·W + b` on a plain row-major `[rows, in]` slice, for the inference path.
pub fn affine_rows(s: &ParamStore, name: &str, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    let w = s.value(&format!("{name}.w"))?;
    let b = s.value(&format!("{name}.b"))?;
    let (din, dout) = w.dims2()?;
    debug_assert_eq!(x.len(), rows * din);
    let mut out = vec![0.0; rows * dout];
    numcore::kernels::gemm_nn(numcore::Execution::Sequential, x, w.data(), rows, din, dout, &mut out);
    for r in out.chunks_mut(dout) {
        r.iter_mut().zip(b.data()).for_each(|(o, bb)| *o += bb);
    }
    Ok(out)
}

/// Row-wise layer norm on a plain slice, matching the tape op.
pub fn layer_norm_rows(s: &ParamStore, name: &str, x: &mut [f64]) -> Result<()> {
    let g = s.value(&format!("{name}.g"))?;
    let b = s.value(&format!("{name}.b"))?;
    let (out, _, _) = numcore::kernels::layer_norm_rows(x, g.numel(), g.data(), b.data(), 1e-5);
    x.copy_from_slice(&out);
    Ok(())
}
