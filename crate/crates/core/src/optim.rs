//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u32,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0)
            || !(0.0..1.0).contains(&beta1)
            || !(0.0..1.0).contains(&beta2)
            || eps <= 0.0
            || weight_decay < 0.0
        {
            return Err(Error::Config(format!(
                "invalid Adam settings lr={lr} betas=({beta1}, {beta2}) eps={eps} wd={weight_decay}"
            )));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update of every trainable tensor; gradients are cleared after.
    /// Decay `θ ← θ·(1 − lr·wd)` is applied before the Adam delta.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(e) = store
            .entries()
            .iter()
            .find(|e| e.tensor.trainable() && e.tensor.grad().is_none())
        {
            return Err(Error::Contract(format!(
                "trainable parameter {} has no gradient",
                e.name
            )));
        }
        self.moments.resize(store.len(), None);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (e, slot) in store.entries_mut().iter_mut().zip(&mut self.moments) {
            if !e.tensor.trainable() {
                continue;
            }
            let g = e.tensor.take_grad().expect("checked above");
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &gi), mi), vi) in e
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
