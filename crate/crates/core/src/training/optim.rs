//! Adaptive-moment optimizer with a fixed learning rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-element first and second moments for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    hp: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(hp: AdamParams, shapes: &[usize]) -> Self {
        Self {
            hp,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `grads[i]` is `None` for tensors that received no gradient
    /// this step; their moments still decay.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Param(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamParams {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.hp;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            if data.len() != m.len() {
                return Err(Error::Param(format!("tensor {i} changed size")));
            }
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                data[j] = (data[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
