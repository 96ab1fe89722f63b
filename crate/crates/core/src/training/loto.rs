//! Leave-one-task-out: pretrain on the other tasks, freeze, train a fresh
//! head for the held-out task.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::finetune::{build_feature_set, train_head_on};
use super::pretrain::{multitask_pretrain, task_stream, BatchLog};
use super::TrainConfig;
use crate::encoder::{init_model, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::pooling::PoolingChoice;
use crate::quant::{QuantMode, QuantOrder};
use crate::rng;
use crate::tasks::TaskDataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldOut {
    /// Pretrain on the other k − 1 tasks for each task.
    #[default]
    Task,
    /// Pretrain on tasks of other families only.
    Family,
    /// Pretrain once on every task (no task is unseen).
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LotoConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingChoice,
    /// Each held-out task gets one head per scheme, on the same encoder.
    pub quants: Vec<QuantMode>,
    pub order: QuantOrder,
    pub pretrain: TrainConfig,
    pub head: TrainConfig,
    pub hold_out: HoldOut,
    /// Skip pretraining and use a freshly initialized frozen encoder.
    pub random_encoder: bool,
}

impl Default for LotoConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pooling: "layer-avg,mha".parse().expect("valid pooling"),
            quants: vec![QuantMode::F32],
            order: QuantOrder::default(),
            pretrain: TrainConfig::pretraining(),
            head: TrainConfig::default(),
            hold_out: HoldOut::Task,
            random_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LotoEntry {
    pub seed: u64,
    pub task: String,
    pub family: String,
    pub pooling: String,
    pub quant: QuantMode,
    pub accuracy: f64,
    /// Tasks that contributed pretraining batches.
    pub pretrained_on: Vec<String>,
    /// Pretraining batches drawn from this (held-out) task.
    pub held_out_batches: usize,
    /// Encoder fingerprint unchanged across head training.
    pub encoder_unchanged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LotoReport {
    pub entries: Vec<LotoEntry>,
}

impl LotoReport {
    pub fn mean_accuracy(&self, quant: QuantMode) -> Option<f64> {
        let accs: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.quant == quant)
            .map(|e| e.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Mean accuracy per task name for one scheme.
    pub fn per_task(&self, quant: QuantMode) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.quant == quant) {
            let s = sums.entry(e.task.clone()).or_default();
            s.0 += e.accuracy;
            s.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// `seed,task,family,pooling,quant,accuracy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,task,family,pooling,quant,accuracy")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},\"{}\",{},{:.6}",
                e.seed, e.task, e.family, e.pooling, e.quant, e.accuracy
            )?;
        }
        Ok(())
    }
}

fn check(tasks: &[TaskDataset], cfg: &LotoConfig) -> Result<()> {
    if tasks.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-task-out needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    let mut names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("task names must be unique".into()));
    }
    if cfg.quants.is_empty() {
        return Err(Error::Config("no quantization schemes requested".into()));
    }
    if cfg.head.finetune_encoder {
        return Err(Error::Config("head training keeps the encoder frozen".into()));
    }
    cfg.encoder.validate()?;
    cfg.pretrain.validate()?;
    cfg.head.validate()?;
    for t in tasks {
        t.validate()?;
    }
    Ok(())
}

/// Indices of the tasks used to pretrain the encoder that serves `held`.
fn pretrain_set(tasks: &[TaskDataset], held: usize, mode: HoldOut) -> Vec<usize> {
    (0..tasks.len())
        .filter(|&i| match mode {
            HoldOut::Task => i != held,
            HoldOut::Family => tasks[i].family != tasks[held].family,
            HoldOut::None => true,
        })
        .collect()
}

/// Runs the protocol for one seed. Folds that share a pretraining set share
/// the pretrained encoder.
pub fn leave_one_task_out(tasks: &[TaskDataset], cfg: &LotoConfig, seed: u64) -> Result<LotoReport> {
    check(tasks, cfg)?;
    let base = init_model(cfg.encoder.with_seed(seed))?;
    let mut cache: BTreeMap<Vec<usize>, (EncoderModel, BatchLog)> = BTreeMap::new();
    let mut report = LotoReport::default();
    for (held, task) in tasks.iter().enumerate() {
        let set = if cfg.random_encoder {
            Vec::new()
        } else {
            pretrain_set(tasks, held, cfg.hold_out)
        };
        if !cfg.random_encoder && set.is_empty() {
            return Err(Error::Config(format!(
                "no pretraining tasks remain when holding out {}",
                task.name
            )));
        }
        if !cache.contains_key(&set) {
            let entry = if set.is_empty() {
                (base.clone(), BatchLog::default())
            } else {
                let chosen: Vec<&TaskDataset> = set.iter().map(|&i| &tasks[i]).collect();
                let out = multitask_pretrain(
                    base.clone(),
                    &chosen,
                    &cfg.pooling,
                    &TrainConfig {
                        seed,
                        ..cfg.pretrain
                    },
                )?;
                (out.model, out.log)
            };
            cache.insert(set.clone(), entry);
        }
        let (model, log) = &cache[&set];
        let pretrained_on: Vec<String> = log.counts().into_keys().collect();
        let held_out_batches = log.batches_for(&task.name);

        let head_seed = seed ^ task_stream(&task.name);
        let c = model.config();
        let spec = cfg.pooling.instantiate(
            c.num_layers,
            c.num_layers,
            c.model_dim,
            c.num_heads,
            &mut rng::derive(head_seed, 0x504f_4f4c),
        );
        for &quant in &cfg.quants {
            let before = model.fingerprint();
            let features = build_feature_set(model, task, &spec.layer, quant, cfg.order)?;
            let trained = train_head_on(
                &features,
                &spec,
                &TrainConfig {
                    seed: head_seed,
                    ..cfg.head
                },
            )?;
            report.entries.push(LotoEntry {
                seed,
                task: task.name.clone(),
                family: task.family.clone(),
                pooling: cfg.pooling.to_string(),
                quant,
                accuracy: trained.dev_accuracy,
                pretrained_on: pretrained_on.clone(),
                held_out_batches,
                encoder_unchanged: model.fingerprint() == before,
            });
        }
    }
    Ok(report)
}

/// The protocol repeated over several seeds, entries concatenated.
pub fn run_loto_seeds(tasks: &[TaskDataset], cfg: &LotoConfig, seeds: &[u64]) -> Result<LotoReport> {
    let mut all = LotoReport::default();
    for &s in seeds {
        all.entries.extend(leave_one_task_out(tasks, cfg, s)?.entries);
    }
    Ok(all)
}
