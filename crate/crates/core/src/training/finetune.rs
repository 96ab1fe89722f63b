//! Stage 2: a fresh head (and pooler) per task on frozen, optionally
//! quantized features.

use rayon::prelude::*;

use super::checkpoint::TaskHead;
use super::optim::Adam;
use super::pretrain::TaskSampler;
use super::{argmax, grads_of, head_graph, head_logits, Head, HeadVars, TrainConfig};
use crate::encoder::{EncoderModel, LayerFeatures};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pooling::{
    layer_graph, pool_layers, pool_positions, position_graph, LayerPooling, PoolingSpec,
    PositionFeatures,
};
use crate::quant::{self, QuantMode, QuantOrder, QuantScheme, DEFAULT_CALIBRATION_VECTORS};
use crate::rng;
use crate::tasks::{Example, TaskDataset};

/// Features ready for the trainable part of a head: either every stored
/// layer (learned layer weights) or a single layer-pooled slab.
#[derive(Clone, Debug, PartialEq)]
pub enum Prepared {
    Layers(LayerFeatures),
    Positions(PositionFeatures),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub train: Vec<Prepared>,
    pub train_labels: Vec<usize>,
    pub dev: Vec<Prepared>,
    pub dev_labels: Vec<usize>,
    pub num_classes: usize,
    pub scheme: QuantScheme,
    pub order: QuantOrder,
}

impl FeatureSet {
    pub fn validate(&self) -> Result<()> {
        if self.train.len() != self.train_labels.len() || self.dev.len() != self.dev_labels.len() {
            return Err(Error::Param("features and labels differ in count".into()));
        }
        if self.train.is_empty() || self.dev.is_empty() {
            return Err(Error::Param("train and dev features must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Param("need at least 2 classes".into()));
        }
        if let Some(l) = self
            .train_labels
            .iter()
            .chain(&self.dev_labels)
            .find(|&&l| l >= self.num_classes)
        {
            return Err(Error::Param(format!("label {l} out of range")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.train[0] {
            Prepared::Layers(f) => f.dim(),
            Prepared::Positions(f) => f.dim(),
        }
    }

    /// Number of layers seen by a learned layer combination, if any.
    pub fn num_layers(&self) -> Option<usize> {
        match &self.train[0] {
            Prepared::Layers(f) => Some(f.num_layers()),
            Prepared::Positions(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedHead {
    pub head: Head,
    pub scheme: QuantScheme,
    pub order: QuantOrder,
    /// Dev accuracy of the selected checkpoint.
    pub dev_accuracy: f64,
    pub best_step: usize,
    pub losses: Vec<f64>,
}

impl TrainedHead {
    pub fn into_task_head(self, name: impl Into<String>) -> TaskHead {
        TaskHead {
            name: name.into(),
            head: self.head,
            scheme: self.scheme,
            order: self.order,
        }
    }
}

/// Transformer-layer outputs (embedding output dropped) for each example.
pub fn extract_layers(model: &EncoderModel, examples: &[Example]) -> Result<Vec<LayerFeatures>> {
    let max = model.config().max_positions;
    examples
        .par_iter()
        .map(|ex| Ok(model.encode(&ex.to_tokens(max)?)?.without_embedding()))
        .collect()
}

/// Quantization order actually applied: learned layer weights need every
/// layer, so they always see per-layer quantized features.
pub fn effective_order(layer: &LayerPooling, order: QuantOrder) -> QuantOrder {
    match layer {
        LayerPooling::LearnedComb { .. } => QuantOrder::BeforeLayerPooling,
        _ => order,
    }
}

/// Calibrates `mode` on up to `max_vectors` feature rows, taken in order
/// from the start of `layers`: per-layer rows when quantizing before layer
/// pooling, pooled rows otherwise.
pub fn calibrate_features(
    mode: QuantMode,
    layers: &[LayerFeatures],
    layer: &LayerPooling,
    order: QuantOrder,
    max_vectors: usize,
) -> Result<QuantScheme> {
    if mode != QuantMode::U8 {
        return mode.calibrate(&[]);
    }
    let mut sample: Vec<f32> = Vec::new();
    let mut rows = 0;
    'outer: for f in layers {
        let slab = match effective_order(layer, order) {
            QuantOrder::BeforeLayerPooling => f.values().clone(),
            QuantOrder::AfterLayerPooling => pool_layers(f, layer)?.values().clone(),
        };
        for r in slab.data().chunks(f.dim()) {
            if rows == max_vectors {
                break 'outer;
            }
            sample.extend_from_slice(r);
            rows += 1;
        }
    }
    mode.calibrate(&sample)
}

/// Applies quantize→dequantize at the requested point of the pipeline and
/// pools layers whenever the layer pooling has no parameters.
pub fn prepare_features(
    layers: Vec<LayerFeatures>,
    layer: &LayerPooling,
    scheme: &QuantScheme,
    order: QuantOrder,
) -> Result<Vec<Prepared>> {
    let order = effective_order(layer, order);
    layers
        .into_par_iter()
        .map(|f| {
            let f = match order {
                QuantOrder::BeforeLayerPooling => {
                    LayerFeatures::new(quant::round_trip(f.values(), scheme)?, f.first_layer())?
                }
                QuantOrder::AfterLayerPooling => f,
            };
            if let LayerPooling::LearnedComb { .. } = layer {
                return Ok(Prepared::Layers(f));
            }
            let pooled = pool_layers(&f, layer)?;
            Ok(Prepared::Positions(match order {
                QuantOrder::AfterLayerPooling => {
                    PositionFeatures::new(quant::round_trip(pooled.values(), scheme)?)?
                }
                QuantOrder::BeforeLayerPooling => pooled,
            }))
        })
        .collect()
}

fn labels(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

/// Extracts, calibrates on training features, quantizes and pools.
pub fn build_feature_set(
    model: &EncoderModel,
    task: &TaskDataset,
    layer: &LayerPooling,
    quant: QuantMode,
    order: QuantOrder,
) -> Result<FeatureSet> {
    let train_layers = extract_layers(model, &task.train)?;
    let dev_layers = extract_layers(model, &task.dev)?;
    let scheme = calibrate_features(
        quant,
        &train_layers,
        layer,
        order,
        DEFAULT_CALIBRATION_VECTORS,
    )?;
    let order = effective_order(layer, order);
    Ok(FeatureSet {
        train: prepare_features(train_layers, layer, &scheme, order)?,
        train_labels: labels(&task.train),
        dev: prepare_features(dev_layers, layer, &scheme, order)?,
        dev_labels: labels(&task.dev),
        num_classes: task.num_classes,
        scheme,
        order,
    })
}

/// Trains a head for `task` on features of the frozen `model`. The model is
/// borrowed immutably: stage 2 cannot change encoder weights.
pub fn train_head(
    model: &EncoderModel,
    task: &TaskDataset,
    pooling: &PoolingSpec,
    quant: QuantMode,
    order: QuantOrder,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    if cfg.finetune_encoder {
        return Err(Error::Config(
            "head training keeps the encoder frozen; finetune through multi-task pretraining"
                .into(),
        ));
    }
    task.validate()?;
    let features = build_feature_set(model, task, &pooling.layer, quant, order)?;
    train_head_on(&features, pooling, cfg)
}

fn prepared_vars(g: &mut Graph<f32>, p: &Prepared) -> Vec<Var> {
    match p {
        Prepared::Layers(f) => (0..f.num_layers())
            .map(|i| g.leaf(f.seq_len(), f.dim(), f.layer(i).to_vec()))
            .collect(),
        Prepared::Positions(f) => vec![g.tensor(f.values())],
    }
}

/// Head training on prepared features with best-dev checkpoint selection.
pub fn train_head_on(
    features: &FeatureSet,
    pooling: &PoolingSpec,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    cfg.validate()?;
    features.validate()?;
    if let (LayerPooling::LearnedComb { logits }, Some(n)) = (&pooling.layer, features.num_layers())
    {
        if logits.len() != n {
            return Err(Error::Param(format!(
                "learned-comb has {} logits for {n} stored layers",
                logits.len()
            )));
        }
    }
    let mut r = rng::derive(cfg.seed, 0x4845_4144);
    let mut head = Head::init(features.dim(), features.num_classes, pooling.clone(), &mut r);
    // Frozen features can sit at any scale (a fresh encoder emits values
    // near the embedding init); start the MLP at unit pre-activation scale.
    let rms = feature_rms(&features.train);
    if rms > 0.0 {
        let k = (1.0 / rms) as f32;
        head.w1.data_mut().iter_mut().for_each(|w| *w *= k);
        if let crate::pooling::PositionPooling::Mha(p) = &mut head.pooling.position {
            p.key_proj.data_mut().iter_mut().for_each(|w| *w *= k);
        }
    }
    let sizes: Vec<usize> = head.params().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg.adam(), &sizes);
    let mut sampler = TaskSampler::new(features.train.len(), rng::derive(cfg.seed, 0x5341_4d50));

    let mut best = (head.clone(), f64::NEG_INFINITY, 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut g = Graph::<f32>::new();
        let hv: HeadVars = head.register(&mut g);
        let mut ces = Vec::with_capacity(batch.len());
        for &i in &batch {
            let inputs = prepared_vars(&mut g, &features.train[i]);
            let mut it = hv.pooling.iter().copied();
            let x = match &features.train[i] {
                Prepared::Layers(_) => layer_graph(&mut g, &inputs, &head.pooling.layer, &mut it)?,
                Prepared::Positions(_) => {
                    if let LayerPooling::LearnedComb { .. } = head.pooling.layer {
                        return Err(Error::Param("learned-comb needs per-layer features".into()));
                    }
                    inputs[0]
                }
            };
            let p = position_graph(&mut g, x, &head.pooling.position, &mut it)?;
            let logits = head_graph(&mut g, p, &hv);
            ces.push(g.cross_entropy(logits, features.train_labels[i]));
        }
        let loss = g.mean(&ces);
        let value = g.value(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                message: "loss is not finite".into(),
            });
        }
        losses.push(value);
        let grads = g.backward(loss, 1.0);
        let mut vars = hv.pooling.clone();
        vars.extend([hv.w1, hv.b1, hv.w2, hv.b2]);
        let grads = grads_of(&grads, &vars);
        adam.step(&mut head.params_mut(), &grads)?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let acc = accuracy(&head, &features.dev, &features.dev_labels)?;
            if acc > best.1 {
                best = (head.clone(), acc, step);
            }
        }
    }
    Ok(TrainedHead {
        head: best.0,
        scheme: features.scheme,
        order: features.order,
        dev_accuracy: best.1,
        best_step: best.2,
        losses,
    })
}

/// Root mean square over (up to) the first 256 prepared training inputs.
fn feature_rms(features: &[Prepared]) -> f64 {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for f in features.iter().take(256) {
        let data = match f {
            Prepared::Layers(x) => x.values().data(),
            Prepared::Positions(x) => x.values().data(),
        };
        sum += data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        count += data.len();
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

pub fn predict(head: &Head, features: &Prepared) -> Result<usize> {
    let positions = match features {
        Prepared::Layers(f) => pool_layers(f, &head.pooling.layer)?,
        Prepared::Positions(f) => f.clone(),
    };
    let pooled = pool_positions(&positions, &head.pooling.position)?;
    Ok(argmax(&head_logits(&pooled, head)?))
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(head: &Head, features: &[Prepared], labels: &[usize]) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Param("accuracy needs matching, non-empty inputs".into()));
    }
    let correct = features
        .par_iter()
        .zip(labels.par_iter())
        .map(|(f, &l)| Ok((predict(head, f)? == l) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / features.len() as f64)
}

/// Dev accuracy of a trained head on features of the frozen `model`,
/// quantized exactly as during training.
pub fn evaluate(task_head: &TaskHead, model: &EncoderModel, task: &TaskDataset) -> Result<f64> {
    let layers = extract_layers(model, &task.dev)?;
    let prepared = prepare_features(
        layers,
        &task_head.head.pooling.layer,
        &task_head.scheme,
        task_head.order,
    )?;
    accuracy(&task_head.head, &prepared, &labels(&task.dev))
}
