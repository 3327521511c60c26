use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient buffer. Frozen
    /// parameters are not touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            if !p.frozen() && p.grad().is_none() {
                return Err(TensorError::Contract(format!(
                    "trainable parameter `{}` has no gradient",
                    p.name
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.frozen()).map(|(id, _)| id).collect();
        for id in ids {
            let grad = store.grad(id).expect("checked above").data().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let value = store.value_mut(id);
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            value.round_to_dtype();
        }
        Ok(())
    }
}
