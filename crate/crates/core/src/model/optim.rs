//! Adaptive-moment optimizer with decoupled weight decay.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed updates.
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Arc<Tensor>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update. A missing gradient means the parameter did not take part in
    /// the loss; it still decays and its moments still age.
    pub fn update(&mut self, params: &mut [Arc<Tensor>], grads: &[Option<Tensor>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut zeros = Vec::new();
        for (i, p) in params.iter_mut().enumerate() {
            let data = Arc::make_mut(p).data_mut();
            let g = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zeros.resize(data.len(), 0.0);
                    &zeros[..data.len()]
                }
            };
            let moments = self.m[i].iter_mut().zip(self.v[i].iter_mut());
            for ((w, &g), (m, v)) in data.iter_mut().zip(g).zip(moments) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *w -= c.lr * (update + c.weight_decay * *w);
            }
        }
    }
}
