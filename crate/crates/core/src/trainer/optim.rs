//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PredictorParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one vector per parameter tensor in
    /// [`PredictorParams::tensors`] order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &PredictorParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Whether the moment buffers have the shapes of `params`.
    pub fn matches(&self, params: &PredictorParams) -> bool {
        let t = params.tensors();
        self.m.len() == t.len()
            && self.v.len() == t.len()
            && t.iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| m.len() == p.len() && v.len() == p.len())
    }

    /// One update `p -= lr · m̂ / (sqrt(v̂) + eps)`.
    pub fn update(&mut self, params: &mut PredictorParams, grads: &PredictorParams, lr: f64) -> Result<()> {
        if !self.matches(params) || !self.matches(grads) {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
