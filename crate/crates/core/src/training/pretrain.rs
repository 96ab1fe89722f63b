//! Stage 1: one batch per task per step, losses combined with task weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{grads_of, head_graph, task_weights, Head, HeadVars, TrainConfig};
use crate::encoder::{forward, EncoderConfig, EncoderModel, TokenSeq};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pooling::{layer_graph, position_graph, PoolingChoice, PoolingSpec};
use crate::rng::{self, Rng};
use crate::tasks::TaskDataset;
use crate::tensor::{Scalar, Tensor};
use super::optim::Adam;

/// Cycles through a shuffled index order, reshuffling after every pass.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl TaskSampler {
    pub fn new(len: usize, mut rng: Rng) -> Self {
        assert!(len > 0, "cannot sample from an empty split");
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stable per-task stream id, so identical tasks get identical heads and
/// batch orders regardless of their position in the suite.
pub(crate) fn task_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One drawn batch: step number (from 1), task name and training indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Draw {
    pub step: usize,
    pub task: String,
    pub indices: Vec<usize>,
}

/// Every batch drawn during pretraining.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchLog {
    pub draws: Vec<Draw>,
}

impl BatchLog {
    pub fn batches_for(&self, task: &str) -> usize {
        self.draws.iter().filter(|d| d.task == task).count()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for d in &self.draws {
            *out.entry(d.task.clone()).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub model: EncoderModel,
    pub heads: Vec<Head>,
    pub weights: Vec<f64>,
    /// `losses[step][task]`, before the update of that step.
    pub losses: Vec<Vec<f64>>,
    pub log: BatchLog,
}

/// Weighted multi-task loss `Σ_i α_i · mean_b CE` over one batch per task.
/// Returns the total and each task's mean loss.
pub fn multitask_step_loss<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    encoder: &[Var],
    heads: &[(&PoolingSpec, &HeadVars)],
    batches: &[Vec<(&[u32], usize)>],
    alphas: &[f64],
) -> Result<(Var, Vec<Var>)> {
    if heads.len() != batches.len() || heads.len() != alphas.len() || heads.is_empty() {
        return Err(Error::Param(format!(
            "{} heads, {} batches and {} weights",
            heads.len(),
            batches.len(),
            alphas.len()
        )));
    }
    let mut task_losses = Vec::with_capacity(heads.len());
    for ((spec, vars), batch) in heads.iter().zip(batches) {
        if batch.is_empty() {
            return Err(Error::Param("empty batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (ids, label) in batch {
            let layers = forward(g, config, encoder, ids);
            let mut it = vars.pooling.iter().copied();
            let x = layer_graph(g, &layers, &spec.layer, &mut it)?;
            let p = position_graph(g, x, &spec.position, &mut it)?;
            let logits = head_graph(g, p, vars);
            losses.push(g.cross_entropy(logits, *label));
        }
        task_losses.push(g.mean(&losses));
    }
    let w = g.leaf(1, alphas.len(), alphas.iter().map(|&a| S::c(a)).collect());
    Ok((g.weighted_sum(&task_losses, w), task_losses))
}

/// The heads `multitask_pretrain` starts from. Each task's head depends only
/// on the seed and the task name, never on its position in `tasks`.
pub fn init_task_heads(
    config: &EncoderConfig,
    tasks: &[&TaskDataset],
    pooling: &PoolingChoice,
    seed: u64,
) -> Vec<Head> {
    tasks
        .iter()
        .map(|t| {
            let mut r = rng::derive(seed, task_stream(&t.name));
            let spec = pooling.instantiate(
                config.num_layers,
                config.num_layers + 1,
                config.model_dim,
                config.num_heads,
                &mut r,
            );
            Head::init(config.model_dim, t.num_classes, spec, &mut r)
        })
        .collect()
}

/// Trains the encoder (if `cfg.finetune_encoder`) together with one fresh
/// head and pooler per task.
pub fn multitask_pretrain(
    model: EncoderModel,
    tasks: &[&TaskDataset],
    pooling: &PoolingChoice,
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("multi-task pretraining needs at least one task".into()));
    }
    let config = *model.config();
    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let weights = task_weights(&sizes, cfg.temperature)?;

    let inputs: Vec<Vec<TokenSeq>> = tasks
        .iter()
        .map(|t| {
            t.train
                .iter()
                .map(|ex| {
                    let seq = ex.to_tokens(config.max_positions)?;
                    model.check_input(&seq)?;
                    Ok(seq)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut heads = init_task_heads(&config, tasks, pooling, cfg.seed);
    let mut samplers: Vec<TaskSampler> = tasks
        .iter()
        .map(|t| {
            TaskSampler::new(
                t.train.len(),
                rng::derive(cfg.seed, task_stream(&t.name).wrapping_add(1)),
            )
        })
        .collect();

    let mut model = model;
    let mut sizes_of = Vec::new();
    if cfg.finetune_encoder {
        sizes_of.extend(model.params().iter().map(Tensor::len));
    }
    for h in &heads {
        sizes_of.extend(h.params().iter().map(|t| t.len()));
    }
    let mut adam = Adam::new(cfg.adam(), &sizes_of);
    let mut log = BatchLog::default();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let draws: Vec<Vec<usize>> = samplers
            .iter_mut()
            .map(|s| s.next_batch(cfg.batch_size))
            .collect();
        for (t, idx) in tasks.iter().zip(&draws) {
            log.draws.push(Draw {
                step,
                task: t.name.clone(),
                indices: idx.clone(),
            });
        }
        let batches: Vec<Vec<(&[u32], usize)>> = draws
            .iter()
            .enumerate()
            .map(|(ti, idx)| {
                idx.iter()
                    .map(|&i| (inputs[ti][i].ids(), tasks[ti].train[i].label))
                    .collect()
            })
            .collect();

        let mut g = Graph::<f32>::new();
        let enc = model.register(&mut g);
        let hv: Vec<HeadVars> = heads.iter().map(|h| h.register(&mut g)).collect();
        let pairs: Vec<(&PoolingSpec, &HeadVars)> =
            heads.iter().map(|h| &h.pooling).zip(hv.iter()).collect();
        let (total, per_task) =
            multitask_step_loss(&mut g, &config, &enc, &pairs, &batches, &weights)?;
        let step_losses: Vec<f64> = per_task.iter().map(|v| g.value(*v)[0] as f64).collect();
        if !g.value(total)[0].is_finite() || step_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Training {
                step,
                message: "loss is not finite".into(),
            });
        }
        losses.push(step_losses);
        let grads = g.backward(total, 1.0);

        let mut vars = Vec::new();
        if cfg.finetune_encoder {
            vars.extend(&enc);
        }
        for v in &hv {
            vars.extend(&v.pooling);
            vars.extend([v.w1, v.b1, v.w2, v.b2]);
        }
        let grads = grads_of(&grads, &vars);
        let mut params: Vec<&mut Tensor> = Vec::new();
        if cfg.finetune_encoder {
            params.extend(model.params_mut().iter_mut());
        }
        for h in heads.iter_mut() {
            params.extend(h.params_mut());
        }
        adam.step(&mut params, &grads)?;
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::Training {
                step,
                message: "parameters diverged".into(),
            });
        }
    }
    Ok(PretrainOutput {
        model,
        heads,
        weights,
        losses,
        log,
    })
}
