use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one Adam update to every `(name, param)` pair using
    /// `grads[name]`. Every parameter must have a gradient of matching shape.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Tensor>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            let g = grads
                .get(*name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let g = grads[name].data();
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if mo.m.len() != g.len() {
                return Err(Error::contract(format!(
                    "optimizer moments for {name} have the wrong size"
                )));
            }
            let data = p.data_mut();
            for i in 0..g.len() {
                mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * g[i];
                mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}
