//! Adam with bias correction and serializable state.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::TensorMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { cfg, vars, m, v, t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// One update from `grads`; parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.m[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * c.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Moments keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        for (i, (n, _)) in self.vars.iter().enumerate() {
            for (k, t) in [("m", &self.m[i]), ("v", &self.v[i])] {
                out.insert(format!("{k}.{n}"), (t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?));
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &TensorMap, t: u64) -> Result<()> {
        for (i, (n, var)) in self.vars.iter().enumerate() {
            for (k, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{k}.{n}");
                let (shape, data) = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state `{key}` missing")))?;
                if shape.as_slice() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state `{key}` has shape {shape:?}")));
                }
                *slot = Tensor::from_vec(data.clone(), shape.as_slice(), var.device())?;
            }
        }
        self.t = t;
        Ok(())
    }
}
