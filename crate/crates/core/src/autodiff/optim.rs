use serde::{Deserialize, Serialize};

use crate::autodiff::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD or Adam over the trainable subset of a [`ParamStore`].
///
/// `step` never zeroes gradients; the training loop zeroes them at the start
/// of every step so a missing zero shows up as doubled gradients.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    moments: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Number of parameters holding moment buffers.
    pub fn moment_buffers(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
        }
        self.step_count += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let lr = self.learning_rate;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = p.value.len();
                    let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    let t = self.step_count as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let grad = p.grad.data();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[i];
                        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                        let m_hat = mom.m[i] / c1;
                        let v_hat = mom.v[i] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
