//! AdamW and a reduce-on-plateau learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::{LrGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_for(name, group)` gives the learning rate of each
    /// parameter; `None` leaves the parameter (and its moments) untouched.
    pub fn step<F>(&mut self, store: &mut ParamStore, lr_for: F) -> Result<()>
    where
        F: Fn(&str, LrGroup) -> Option<f64>,
    {
        let c = self.config;
        for (name, p) in store.iter() {
            if let Some(lr) = lr_for(name, p.group) {
                if lr.is_nan() || lr < 0.0 {
                    return Err(NumError::InvalidArgument(format!("invalid learning rate {lr} for {name}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let Some(lr) = lr_for(name, p.group) else { continue };
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = if bc1 > 0.0 { m[i] / bc1 } else { m[i] };
                let vhat = if bc2 > 0.0 { v[i] / bc2 } else { v[i] };
                value[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 2,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || self.patience == 0 {
            return Err(NumError::InvalidArgument(format!(
                "plateau factor {} must be in (0,1) and patience {} >= 1",
                self.factor, self.patience
            )));
        }
        Ok(())
    }
}

/// Reduce-on-plateau for a metric that should increase.
#[derive(Clone, Debug)]
pub struct Plateau {
    config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    stalls: usize,
}

impl Plateau {
    pub fn new(config: PlateauConfig, base_lr: f64) -> Result<Self> {
        config.validate()?;
        Ok(Plateau {
            config,
            lr: base_lr,
            best: None,
            stalls: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation value and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.stalls += 1;
                if self.stalls >= self.config.patience {
                    self.lr = (self.lr * self.config.factor).max(self.config.min_lr.min(self.lr));
                    self.stalls = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stalls = 0;
            }
        }
        self.lr
    }
}

/// Replays `history` through [`Plateau`] and returns the final lr as a
/// multiple of `base_lr`.
pub fn plateau_step(history: &[f64], config: PlateauConfig, base_lr: f64) -> Result<f64> {
    let mut p = Plateau::new(config, base_lr)?;
    for &h in history {
        p.observe(h);
    }
    Ok(if base_lr == 0.0 { 1.0 } else { p.lr() / base_lr })
}
