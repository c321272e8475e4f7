use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters plus per-parameter moment slots.
///
/// Slots are indexed like the [`ParamStore`] they were created for; buffers
/// (non-trainable tensors) get empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let slots = |p: &ParamStore| -> Vec<Vec<f64>> {
            p.iter()
                .map(|(_, t)| match (kind, t.requires_grad()) {
                    (OptimizerKind::Adam, true) => vec![0.0; t.numel()],
                    _ => Vec::new(),
                })
                .collect()
        };
        OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: slots(params),
            second_moment: slots(params),
        }
    }

    /// Applies one update from the gradients held in `params`.
    ///
    /// Every gradient is checked before anything is written, so a non-finite
    /// gradient leaves both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {name}")));
                }
            }
        }
        match self.kind {
            OptimizerKind::Sgd => self.sgd_step(params),
            OptimizerKind::Adam => self.adam_step(params),
        }
        Ok(())
    }

    fn sgd_step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            t.data_mut().iter_mut().zip(&g).for_each(|(p, g)| *p -= self.lr * g);
        }
    }

    fn adam_step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
