//! Multi-task pretraining, frozen-feature head training and the
//! leave-one-task-out protocol.

mod checkpoint;
mod finetune;
mod loto;
mod optim;
mod pretrain;

pub use checkpoint::{read_task_head, write_task_head, TaskHead};
pub use finetune::{
    accuracy, build_feature_set, calibrate_features, effective_order, evaluate, extract_layers,
    predict, prepare_features, train_head, train_head_on, FeatureSet, Prepared, TrainedHead,
};
pub use loto::{
    leave_one_task_out, run_loto_seeds, HoldOut, LotoConfig, LotoEntry, LotoReport,
};
pub use optim::{Adam, AdamParams};
pub use pretrain::{
    init_task_heads, multitask_pretrain, multitask_step_loss, BatchLog, Draw, PretrainOutput, TaskSampler,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, softmax_in_place, Graph, Var};
use crate::pooling::{PooledVector, PoolingSpec};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Task-weight temperature; see [`task_weights`].
    pub temperature: f64,
    pub seed: u64,
    /// Update encoder weights. Only meaningful for multi-task pretraining.
    pub finetune_encoder: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Dev evaluation period for best-checkpoint selection (head training).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            learning_rate: 3e-3,
            temperature: 0.1,
            seed: 0,
            finetune_encoder: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    /// Stage-1 defaults: encoder updated, smaller batches per task, more steps.
    pub fn pretraining() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            finetune_encoder: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("steps, batch_size and eval_every must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return bad("learning rate and temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Task loss weights `α_i ∝ D_i^T`, normalized to sum to one and computed in
/// log space. `T = 1` weights tasks by data size; smaller `T` flattens the
/// weights toward uniform.
pub fn task_weights(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Param("no task sizes".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Param("task sizes must be at least 1".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Param(format!("temperature {temperature} must be positive")));
    }
    let logits: Vec<f64> = sizes.iter().map(|&d| temperature * (d as f64).ln()).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Two-layer tanh MLP over a pooled vector, with its task-owned pooler.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub pooling: PoolingSpec,
}

/// Graph leaves of one head: pooler parameters, then the MLP.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub pooling: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Head {
    pub fn init(dim: usize, num_classes: usize, pooling: PoolingSpec, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            w1: rng::normal_tensor(rng, vec![dim, dim], std),
            b1: Tensor::zeros(vec![dim]),
            w2: rng::normal_tensor(rng, vec![dim, num_classes], std),
            b2: Tensor::zeros(vec![num_classes]),
            pooling,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let c = self.num_classes();
        let ok = self.w1.shape() == [d, d]
            && self.b1.shape() == [d]
            && self.w2.shape() == [d, c]
            && self.b2.shape() == [c];
        if !ok {
            return Err(Error::Param(format!(
                "inconsistent head shapes {:?} {:?} {:?} {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        if c < 2 {
            return Err(Error::Param("a head needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// Pooler parameters followed by `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.pooling.params();
        out.extend([&self.w1, &self.b1, &self.w2, &self.b2]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.pooling.params_mut();
        out.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
        out
    }

    pub fn register<S: Scalar>(&self, g: &mut Graph<S>) -> HeadVars {
        let pooling = self.pooling.params().into_iter().map(|t| g.tensor(t)).collect();
        HeadVars {
            pooling,
            w1: g.tensor(&self.w1),
            b1: g.tensor(&self.b1),
            w2: g.tensor(&self.w2),
            b2: g.tensor(&self.b2),
        }
    }
}

/// Logits `w2ᵀ·tanh(w1ᵀ·p + b1) + b2` for a `1 × d` pooled row.
pub(crate) fn head_graph<S: Scalar>(g: &mut Graph<S>, pooled: Var, v: &HeadVars) -> Var {
    let h = g.matmul(pooled, v.w1);
    let h = g.add_row(h, v.b1);
    let h = g.tanh(h);
    let o = g.matmul(h, v.w2);
    g.add_row(o, v.b2)
}

pub fn head_logits(pooled: &PooledVector, head: &Head) -> Result<Vec<f32>> {
    head.validate()?;
    let p = pooled.values();
    let (d, c) = (head.dim(), head.num_classes());
    if p.len() != d {
        return Err(Error::Param(format!(
            "pooled vector has {} features, head expects {d}",
            p.len()
        )));
    }
    let (w1, b1, w2, b2) = (head.w1.data(), head.b1.data(), head.w2.data(), head.b2.data());
    let hidden: Vec<f64> = (0..d)
        .map(|j| {
            let z: f64 = (0..d).map(|i| p[i] as f64 * w1[i * d + j] as f64).sum::<f64>()
                + b1[j] as f64;
            z.tanh()
        })
        .collect();
    Ok((0..c)
        .map(|k| {
            ((0..d).map(|j| hidden[j] * w2[j * c + k] as f64).sum::<f64>() + b2[k] as f64) as f32
        })
        .collect())
}

/// Class probabilities of the head on a pooled vector.
pub fn head_forward(pooled: &PooledVector, head: &Head) -> Result<Vec<f32>> {
    let mut logits: Vec<f64> = head_logits(pooled, head)?.iter().map(|&x| x as f64).collect();
    softmax_in_place(&mut logits);
    Ok(logits.into_iter().map(|x| x as f32).collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn grads_of<S: Scalar>(grads: &crate::graph::Grads<S>, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
    vars.iter()
        .map(|v| grads.get(*v).map(|g| g.iter().map(|x| x.to_f64().unwrap()).collect()))
        .collect()
}
