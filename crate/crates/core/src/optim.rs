//! Adam and plain SGD over a [`ParamSet`].

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerKind::Adam { beta1, beta2, eps, .. } => OptimizerKind::Adam { lr, beta1, beta2, eps },
            OptimizerKind::Sgd { .. } => OptimizerKind::Sgd { lr },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerKind::Sgd { lr } => lr > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer with per-parameter moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments (empty for SGD).
    pub moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update from the gradients currently held by `params`' leaves.
    /// Parameters without a gradient are left untouched. Every updated
    /// tensor is replaced with a fresh leaf, which also clears its gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let mut updates = Vec::new();
        for (name, p) in params.iter() {
            if !p.role.trainable() {
                continue;
            }
            let Some(g) = p.tensor.grad() else { continue };
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                    index,
                    value,
                });
            }
            updates.push((name.to_string(), p.tensor.to_vec(), g));
        }
        self.t += 1;
        let t = self.t as f64;
        for (name, mut w, g) in updates {
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= lr * gi;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            params.set_data(&name, w)?;
        }
        params.bump_version();
        Ok(())
    }
}
