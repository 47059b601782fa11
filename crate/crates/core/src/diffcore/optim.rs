use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Optimizer over a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    params: Vec<ParamId>,
    step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: Vec<ParamId>) -> Self {
        Optimizer {
            cfg,
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(&id)?.as_slice(), self.v.get(&id)?.as_slice()))
    }

    /// Applies one update to every parameter in the group, then clears their
    /// gradients. Every parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if store.get(id).grad().is_none() {
                return Err(Error::contract(format!(
                    "optimizer step: parameter '{}' has no gradient",
                    store.name(id)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        for &id in &self.params {
            let p = store.get_mut(id);
            let g = p.grad().expect("checked above").to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in p.data_mut().iter_mut().zip(&g) {
                        *x -= c.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = g.len();
                    let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (i, x) in p.data_mut().iter_mut().enumerate() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *x -= c.lr * mh / (vh.sqrt() + c.eps);
                    }
                }
            }
            if !p.is_finite() {
                return Err(Error::numeric(format!(
                    "parameter '{}' became non-finite",
                    store.name(id)
                )));
            }
            store.get_mut(id).zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn one_param(value: f64, grad: Option<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value));
        if let Some(g) = grad {
            s.get_mut(id).accumulate_grad(&[g]).unwrap();
        }
        (s, id)
    }

    #[test]
    fn sgd_step() {
        let (mut s, id) = one_param(1.0, Some(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), vec![id]);
        opt.step(&mut s).unwrap();
        assert!((s.get(id).item() - 0.9).abs() < 1e-15);
        assert!(s.get(id).grad().is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_zero_lr() {
        let (mut s, id) = one_param(0.37, Some(-4.0));
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0), vec![id]);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).item(), 0.37);
    }

    #[test]
    fn adam_first_step() {
        let (mut s, id) = one_param(1.0, Some(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), vec![id]);
        opt.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.get(id).item() - expected).abs() < 1e-15);
        let (m, v) = opt.moments(id).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn missing_grad() {
        let (mut s, id) = one_param(1.0, None);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), vec![id]);
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }
}
