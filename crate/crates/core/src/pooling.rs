//! Collapsing per-layer, per-position features into one vector: first across
//! layers, then across positions.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::encoder::LayerFeatures;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};
use crate::wire::{Reader, Writer};

/// Layers averaged by `layer-avg` when no count is given.
pub const DEFAULT_AVG_LAYERS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerPooling {
    Last,
    /// Mean of the last `m` layers (clamped to the layers available).
    Avg { m: usize },
    /// `Σ softmax(logits)_ℓ · layer_ℓ`, one logit per available layer.
    LearnedComb { logits: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub query: Tensor,
    pub key_proj: Tensor,
    pub value_proj: Tensor,
    pub out_proj: Tensor,
    pub num_heads: usize,
}

impl MhaParams {
    /// Identity projections with the given query.
    pub fn identity(query: Tensor, num_heads: usize) -> Self {
        let d = query.len();
        Self {
            query,
            key_proj: Tensor::identity(d),
            value_proj: Tensor::identity(d),
            out_proj: Tensor::identity(d),
            num_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    fn validate(&self, d: usize) -> Result<()> {
        let square = [d, d];
        if self.query.shape() != [d] {
            return Err(Error::Param(format!(
                "MHA query has shape {:?}, features have width {d}",
                self.query.shape()
            )));
        }
        for (name, t) in [
            ("key_proj", &self.key_proj),
            ("value_proj", &self.value_proj),
            ("out_proj", &self.out_proj),
        ] {
            if t.shape() != square {
                return Err(Error::Param(format!(
                    "MHA {name} has shape {:?}, expected {square:?}",
                    t.shape()
                )));
            }
        }
        if self.num_heads == 0 || !d.is_multiple_of(self.num_heads) {
            return Err(Error::Param(format!(
                "MHA heads {} do not divide width {d}",
                self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionPooling {
    Cls,
    Avg,
    Mha(MhaParams),
}

/// Features after layer pooling: `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionFeatures {
    values: Tensor,
}

impl PositionFeatures {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Param(format!(
                "position features must be rank 2, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Param("ragged feature rows".into()));
        }
        Self::new(Tensor::new(
            vec![rows.len(), d],
            rows.iter().flatten().copied().collect(),
        )?)
    }

    pub fn seq_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// One fixed-size vector per example.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector {
    values: Tensor,
}

impl PooledVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self {
            values: Tensor::from_vec(values),
        }
    }

    pub fn values(&self) -> &[f32] {
        self.values.data()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingSpec {
    pub layer: LayerPooling,
    pub position: PositionPooling,
}

impl PoolingSpec {
    pub fn new(layer: LayerPooling, position: PositionPooling) -> Self {
        Self { layer, position }
    }

    /// Trainable tensors in a fixed order: layer logits, then MHA weights.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let LayerPooling::LearnedComb { logits } = &self.layer {
            out.push(logits);
        }
        if let PositionPooling::Mha(p) = &self.position {
            out.extend([&p.query, &p.key_proj, &p.value_proj, &p.out_proj]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let LayerPooling::LearnedComb { logits } = &mut self.layer {
            out.push(logits);
        }
        if let PositionPooling::Mha(p) = &mut self.position {
            out.extend([
                &mut p.query,
                &mut p.key_proj,
                &mut p.value_proj,
                &mut p.out_proj,
            ]);
        }
        out
    }

    /// Whether layer pooling has no trainable state and can be applied
    /// once, ahead of training.
    /// Feature width the MHA pooler expects, if it has one.
    pub fn mha_dim(&self) -> Option<usize> {
        match &self.position {
            PositionPooling::Mha(p) => Some(p.dim()),
            _ => None,
        }
    }

    pub fn layer_pooling_is_fixed(&self) -> bool {
        !matches!(self.layer, LayerPooling::LearnedComb { .. })
    }

    pub fn choice(&self) -> PoolingChoice {
        PoolingChoice {
            layer: match &self.layer {
                LayerPooling::Last => LayerChoice::Last,
                LayerPooling::Avg { m } => LayerChoice::Avg(Some(*m)),
                LayerPooling::LearnedComb { .. } => LayerChoice::LearnedComb,
            },
            position: match &self.position {
                PositionPooling::Cls => PositionChoice::Cls,
                PositionPooling::Avg => PositionChoice::Avg,
                PositionPooling::Mha(_) => PositionChoice::Mha,
            },
        }
    }

    pub(crate) fn write<W: Write>(&self, w: &mut Writer<W>) -> Result<()> {
        match &self.layer {
            LayerPooling::Last => w.u8(0)?,
            LayerPooling::Avg { m } => {
                w.u8(1)?;
                w.u32(*m as u32)?;
            }
            LayerPooling::LearnedComb { logits } => {
                w.u8(2)?;
                w.tensor(logits)?;
            }
        }
        match &self.position {
            PositionPooling::Cls => w.u8(0)?,
            PositionPooling::Avg => w.u8(1)?,
            PositionPooling::Mha(p) => {
                w.u8(2)?;
                w.u32(p.num_heads as u32)?;
                for t in [&p.query, &p.key_proj, &p.value_proj, &p.out_proj] {
                    w.tensor(t)?;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn read<R: Read>(r: &mut Reader<R>) -> Result<Self> {
        let at = r.offset();
        let layer = match r.u8("layer pooling tag")? {
            0 => LayerPooling::Last,
            1 => LayerPooling::Avg {
                m: r.u32("layer-avg count")? as usize,
            },
            2 => LayerPooling::LearnedComb { logits: r.tensor()? },
            t => return Err(Error::format(at, format!("unknown layer pooling tag {t}"))),
        };
        let at = r.offset();
        let position = match r.u8("position pooling tag")? {
            0 => PositionPooling::Cls,
            1 => PositionPooling::Avg,
            2 => {
                let num_heads = r.u32("MHA heads")? as usize;
                PositionPooling::Mha(MhaParams {
                    query: r.tensor()?,
                    key_proj: r.tensor()?,
                    value_proj: r.tensor()?,
                    out_proj: r.tensor()?,
                    num_heads,
                })
            }
            t => {
                return Err(Error::format(
                    at,
                    format!("unknown position pooling tag {t}"),
                ))
            }
        };
        Ok(Self { layer, position })
    }
}

pub fn pool_layers(features: &LayerFeatures, strategy: &LayerPooling) -> Result<PositionFeatures> {
    let mut g = Graph::<f32>::new();
    let layers: Vec<Var> = (0..features.num_layers())
        .map(|i| {
            g.leaf(
                features.seq_len(),
                features.dim(),
                features.layer(i).to_vec(),
            )
        })
        .collect();
    let mut params = Vec::new();
    if let LayerPooling::LearnedComb { logits } = strategy {
        params.push(g.tensor(logits));
    }
    let out = layer_graph(&mut g, &layers, strategy, &mut params.into_iter())?;
    PositionFeatures::new(Tensor::new(
        vec![features.seq_len(), features.dim()],
        g.value(out).to_vec(),
    )?)
}

pub fn pool_positions(
    features: &PositionFeatures,
    strategy: &PositionPooling,
) -> Result<PooledVector> {
    if features.seq_len() == 0 {
        return Err(Error::Input("cannot pool zero positions".into()));
    }
    match strategy {
        PositionPooling::Mha(p) => mha_pool(features, p),
        _ => {
            let mut g = Graph::<f32>::new();
            let x = g.tensor(features.values());
            let out = position_graph(&mut g, x, strategy, &mut std::iter::empty())?;
            Ok(PooledVector::new(g.value(out).to_vec()))
        }
    }
}

/// Attention pooling with a learned query over projected keys and values.
pub fn mha_pool(features: &PositionFeatures, params: &MhaParams) -> Result<PooledVector> {
    if features.seq_len() == 0 {
        return Err(Error::Input("cannot pool zero positions".into()));
    }
    params.validate(features.dim())?;
    let mut g = Graph::<f32>::new();
    let x = g.tensor(features.values());
    let vars = [
        g.tensor(&params.query),
        g.tensor(&params.key_proj),
        g.tensor(&params.value_proj),
        g.tensor(&params.out_proj),
    ];
    let out = position_graph(
        &mut g,
        x,
        &PositionPooling::Mha(params.clone()),
        &mut vars.into_iter(),
    )?;
    Ok(PooledVector::new(g.value(out).to_vec()))
}

/// Per-head attention weights of the MHA pooler, `heads × n`.
pub fn mha_attention_weights(
    features: &PositionFeatures,
    params: &MhaParams,
) -> Result<Vec<Vec<f32>>> {
    params.validate(features.dim())?;
    let (n, d) = (features.seq_len(), features.dim());
    let dh = d / params.num_heads;
    let mut g = Graph::<f32>::new();
    let x = g.tensor(features.values());
    let kp = g.tensor(&params.key_proj);
    let keys = g.matmul(x, kp);
    let k = g.value(keys);
    let q = params.query.data();
    let scale = 1.0 / (dh as f32).sqrt();
    Ok((0..params.num_heads)
        .map(|h| {
            let mut w: Vec<f32> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|t| q[h * dh + t] * k[j * d + h * dh + t])
                        .sum::<f32>()
                        * scale
                })
                .collect();
            crate::graph::softmax_in_place(&mut w);
            w
        })
        .collect())
}

/// Differentiable layer pooling. `params` yields the logits leaf for
/// `LearnedComb`.
pub(crate) fn layer_graph<S: Scalar>(
    g: &mut Graph<S>,
    layers: &[Var],
    strategy: &LayerPooling,
    params: &mut impl Iterator<Item = Var>,
) -> Result<Var> {
    let count = layers.len();
    if count == 0 {
        return Err(Error::Input("no layers to pool".into()));
    }
    match strategy {
        LayerPooling::Last => Ok(layers[count - 1]),
        LayerPooling::Avg { m } => {
            if *m == 0 {
                return Err(Error::Param("layer-avg needs m >= 1".into()));
            }
            let m = (*m).min(count);
            Ok(g.mean(&layers[count - m..]))
        }
        LayerPooling::LearnedComb { logits } => {
            if logits.len() != count {
                return Err(Error::Param(format!(
                    "learned-comb has {} logits for {count} layers",
                    logits.len()
                )));
            }
            let w = params
                .next()
                .ok_or_else(|| Error::Param("missing learned-comb logits".into()))?;
            let weights = g.softmax(w);
            Ok(g.weighted_sum(layers, weights))
        }
    }
}

/// Differentiable position pooling. `params` yields query, key, value and
/// output projection leaves for `Mha`.
pub(crate) fn position_graph<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    strategy: &PositionPooling,
    params: &mut impl Iterator<Item = Var>,
) -> Result<Var> {
    let (n, d) = g.dims(x);
    if n == 0 {
        return Err(Error::Input("cannot pool zero positions".into()));
    }
    match strategy {
        PositionPooling::Cls => Ok(g.row(x, 0)),
        PositionPooling::Avg => Ok(g.mean_rows(x)),
        PositionPooling::Mha(p) => {
            p.validate(d)?;
            let mut next = || {
                params
                    .next()
                    .ok_or_else(|| Error::Param("missing MHA parameters".into()))
            };
            let (q, kp, vp, op) = (next()?, next()?, next()?, next()?);
            let keys = g.matmul(x, kp);
            let values = g.matmul(x, vp);
            let att = g.attention(q, keys, values, p.num_heads);
            Ok(g.matmul(att, op))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerChoice {
    Last,
    /// `None` means the default of `min(16, L)` post-embedding layers.
    Avg(Option<usize>),
    LearnedComb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionChoice {
    Cls,
    Avg,
    Mha,
}

/// A pooling strategy without parameters, as written on the command line:
/// `<layer>,<position>` with layer in `last`, `layer-avg[:m]`,
/// `learned-comb` and position in `cls`, `pos-avg`, `mha`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingChoice {
    pub layer: LayerChoice,
    pub position: PositionChoice,
}

impl PoolingChoice {
    pub fn new(layer: LayerChoice, position: PositionChoice) -> Self {
        Self { layer, position }
    }

    /// Creates fresh task-owned pooling parameters. `num_layers` counts the
    /// Transformer layers of the encoder, `available_layers` the slabs the
    /// pooler will actually see (L + 1 with the embedding output).
    pub fn instantiate(
        &self,
        num_layers: usize,
        available_layers: usize,
        dim: usize,
        num_heads: usize,
        rng: &mut Rng,
    ) -> PoolingSpec {
        let layer = match self.layer {
            LayerChoice::Last => LayerPooling::Last,
            LayerChoice::Avg(m) => LayerPooling::Avg {
                m: m.unwrap_or(DEFAULT_AVG_LAYERS.min(num_layers)),
            },
            LayerChoice::LearnedComb => LayerPooling::LearnedComb {
                logits: Tensor::zeros(vec![available_layers]),
            },
        };
        let position = match self.position {
            PositionChoice::Cls => PositionPooling::Cls,
            PositionChoice::Avg => PositionPooling::Avg,
            PositionChoice::Mha => PositionPooling::Mha(MhaParams::identity(
                rng::normal_tensor(rng, vec![dim], 0.02),
                num_heads,
            )),
        };
        PoolingSpec { layer, position }
    }
}

impl fmt::Display for PoolingChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            LayerChoice::Last => write!(f, "last")?,
            LayerChoice::Avg(None) => write!(f, "layer-avg")?,
            LayerChoice::Avg(Some(m)) => write!(f, "layer-avg:{m}")?,
            LayerChoice::LearnedComb => write!(f, "learned-comb")?,
        }
        let pos = match self.position {
            PositionChoice::Cls => "cls",
            PositionChoice::Avg => "pos-avg",
            PositionChoice::Mha => "mha",
        };
        write!(f, ",{pos}")
    }
}

impl FromStr for PoolingChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("invalid pooling spec {s:?}"));
        let (layer, position) = s.split_once(',').ok_or_else(bad)?;
        let layer = match layer.trim() {
            "last" => LayerChoice::Last,
            "layer-avg" => LayerChoice::Avg(None),
            "learned-comb" => LayerChoice::LearnedComb,
            other => {
                let m = other
                    .strip_prefix("layer-avg:")
                    .and_then(|m| m.parse::<usize>().ok())
                    .ok_or_else(bad)?;
                if m == 0 {
                    return Err(Error::Param("layer-avg needs m >= 1".into()));
                }
                LayerChoice::Avg(Some(m))
            }
        };
        let position = match position.trim() {
            "cls" => PositionChoice::Cls,
            "pos-avg" => PositionChoice::Avg,
            "mha" => PositionChoice::Mha,
            _ => return Err(bad()),
        };
        Ok(Self { layer, position })
    }
}
