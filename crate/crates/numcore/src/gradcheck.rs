//! Central finite-difference verification of tape gradients.

use crate::error::{NumError, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};

fn analytic<F>(store: &ParamStore, loss_fn: &F) -> Result<ParamStore>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let mut s = store.clone();
    s.zero_grad();
    let (tape, loss) = loss_fn(&s)?;
    tape.backward_into(loss, &mut s)?;
    Ok(s)
}

fn loss_at<F>(s: &mut ParamStore, name: &str, i: usize, x: f64, loss_fn: &F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    s.get_mut(name)?.value.data_mut()[i] = x;
    let (tape, loss) = loss_fn(s)?;
    Ok(tape.value(loss).item())
}

fn check_entries<F>(store: &ParamStore, eps: f64, loss_fn: &F, entries: &[(String, usize)]) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NumError::InvalidArgument(format!("finite-difference eps {eps} outside (0, 1e-2]")));
    }
    let grads = analytic(store, loss_fn)?;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for (name, i) in entries {
        let x0 = store.value(name)?.data()[*i];
        let up = loss_at(&mut work, name, *i, x0 + eps, loss_fn)?;
        let down = loss_at(&mut work, name, *i, x0 - eps, loss_fn)?;
        work.get_mut(name)?.value.data_mut()[*i] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let a = grads.grad(name)?.data()[*i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Max over every scalar parameter of `|analytic − numeric| / max(1, |analytic|)`.
///
/// `loss_fn` rebuilds the scalar loss from the given parameters; it must be
/// deterministic (disable dropout).
pub fn finite_diff_check<F>(store: &ParamStore, eps: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let entries: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(n, p)| (0..p.value.numel()).map(move |i| (n.clone(), i)))
        .collect();
    check_entries(store, eps, &loss_fn, &entries)
}

/// Like [`finite_diff_check`] but probes at most `per_param` randomly chosen
/// entries of each parameter.
pub fn finite_diff_check_sampled<F>(store: &ParamStore, eps: f64, per_param: usize, seed: u64, loss_fn: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let mut rng = Rng::new(seed);
    let mut entries = Vec::new();
    for (n, p) in store.iter() {
        for i in rng.choose_distinct(p.value.numel(), per_param) {
            entries.push((n.clone(), i));
        }
    }
    check_entries(store, eps, &loss_fn, &entries)
}
