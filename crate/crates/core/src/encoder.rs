//! A small pre-norm Transformer encoder that emits the hidden state of every
//! layer. Its output is the shared computation reused across tasks.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::wire::{Reader, Writer};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
/// Ids below this value are reserved.
pub const FIRST_CONTENT_ID: u32 = 4;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"AMTM";
const CHECKPOINT_VERSION: u16 = 1;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 32,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 64,
            max_positions: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Config with `ffn_dim = 4 · model_dim`.
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            ffn_dim: 4 * model_dim,
            ..Self::default()
        }
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_max_positions(mut self, max_positions: usize) -> Self {
        self.max_positions = max_positions;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.model_dim == 0 || self.num_heads == 0 {
            return fail("model_dim and num_heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.ffn_dim < self.model_dim {
            return fail(format!(
                "ffn_dim {} is smaller than model_dim {}",
                self.ffn_dim, self.model_dim
            ));
        }
        if self.vocab_size < FIRST_CONTENT_ID as usize {
            return fail(format!("vocab_size {} is below 4", self.vocab_size));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        Ok(())
    }

    /// Names and shapes of every weight tensor, in checkpoint order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let f = self.ffn_dim;
        let mut out = vec![
            ("token_embeddings".to_string(), vec![self.vocab_size, d]),
            ("position_embeddings".to_string(), vec![self.max_positions, d]),
        ];
        for l in 0..self.num_layers {
            let p = |name: &str| format!("layer{l}.{name}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out
    }
}

/// Exact number of trainable scalars for a config.
pub fn param_count(config: &EncoderConfig) -> u64 {
    config
        .param_layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

/// Token ids starting with CLS, at most one SEP splitting a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        match ids.first() {
            None => return Err(Error::Input("token sequence is empty".into())),
            Some(&first) if first != CLS => {
                return Err(Error::Input(format!(
                    "token sequence must start with CLS, found {first}"
                )))
            }
            _ => {}
        }
        if ids.iter().filter(|&&t| t == SEP).count() > 1 {
            return Err(Error::Input("more than one SEP token".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Hidden states of every layer: `[(layers) × n × d]`.
///
/// `first_layer` is the encoder depth of the first stored slab: 0 when the
/// embedding output is included, 1 when only Transformer layers are kept.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatures {
    values: Tensor,
    first_layer: usize,
}

impl LayerFeatures {
    pub fn new(values: Tensor, first_layer: usize) -> Result<Self> {
        if values.rank() != 3 || values.shape().contains(&0) {
            return Err(Error::Param(format!(
                "layer features must be a non-empty rank-3 tensor, got {:?}",
                values.shape()
            )));
        }
        Ok(Self {
            values,
            first_layer,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// One layer as a flat `n × d` slice.
    pub fn layer(&self, i: usize) -> &[f32] {
        let size = self.seq_len() * self.dim();
        &self.values.data()[i * size..(i + 1) * size]
    }

    /// Drops the embedding-layer slab, keeping Transformer outputs only.
    pub fn without_embedding(&self) -> LayerFeatures {
        if self.first_layer > 0 || self.num_layers() == 1 {
            return self.clone();
        }
        let (n, d) = (self.seq_len(), self.dim());
        let data = self.values.data()[n * d..].to_vec();
        let values = Tensor::new(vec![self.num_layers() - 1, n, d], data).expect("sliced shape");
        LayerFeatures {
            values,
            first_layer: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

/// Builds a model with weights drawn deterministically from `config.seed`:
/// N(0, 0.02) for embeddings and projections, zero biases, unit norm gains.
pub fn init_model(config: EncoderConfig) -> Result<EncoderModel> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let params = config
        .param_layout()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                rng::normal_tensor(&mut rng, shape, INIT_STD)
            }
        })
        .collect();
    Ok(EncoderModel { config, params })
}

impl EncoderModel {
    pub fn from_params(config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Param(format!(
                "expected {} weight tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Param(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Param(format!("{name} has non-finite weights")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn check_input(&self, input: &TokenSeq) -> Result<()> {
        if input.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "input of {} tokens exceeds max_positions {}",
                input.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = input
            .ids()
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder and returns the embedding output plus every layer.
    pub fn encode(&self, input: &TokenSeq) -> Result<LayerFeatures> {
        self.check_input(input)?;
        let mut g = Graph::<f32>::new();
        let vars = self.register(&mut g);
        let layers = forward(&mut g, &self.config, &vars, input.ids());
        let (n, d) = (input.len(), self.config.model_dim);
        let mut data = Vec::with_capacity(layers.len() * n * d);
        for v in &layers {
            data.extend_from_slice(g.value(*v));
        }
        LayerFeatures::new(Tensor::new(vec![layers.len(), n, d], data)?, 0)
    }

    /// Registers every weight as a leaf of `g`, in layout order.
    pub fn register<S: Scalar>(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.iter().map(|t| g.tensor(t)).collect()
    }

    pub fn write_checkpoint<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = Writer::new(sink);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u16(CHECKPOINT_VERSION)?;
        let c = &self.config;
        for v in [
            c.num_layers,
            c.model_dim,
            c.num_heads,
            c.ffn_dim,
            c.vocab_size,
            c.max_positions,
        ] {
            w.u32(u32::try_from(v).map_err(|_| Error::Config(format!("{v} too large")))?)?;
        }
        w.u64(c.seed)?;
        for t in &self.params {
            w.tensor(t)?;
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(source: R) -> Result<Self> {
        let mut r = Reader::new(source);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let mut next = |what| r.u32(what).map(|v| v as usize);
        let config = EncoderConfig {
            num_layers: next("num_layers")?,
            model_dim: next("model_dim")?,
            num_heads: next("num_heads")?,
            ffn_dim: next("ffn_dim")?,
            vocab_size: next("vocab_size")?,
            max_positions: next("max_positions")?,
            seed: r.u64("seed")?,
        };
        let at = r.offset();
        config
            .validate()
            .map_err(|e| Error::format(at, e.to_string()))?;
        let count = config.param_layout().len();
        let params = (0..count)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_params(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the checkpoint bytes.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Builds the forward pass on `g` from weight leaves in layout order.
/// Returns `L + 1` nodes of shape `n × d`: the embedding output, then each
/// Transformer layer.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    params: &[Var],
    ids: &[u32],
) -> Vec<Var> {
    assert_eq!(params.len(), 2 + PARAMS_PER_LAYER * config.num_layers);
    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather(params[0], &ids);
    let pos = g.gather(params[1], &positions);
    let mut h = g.add(tok, pos);
    let mut layers = Vec::with_capacity(config.num_layers + 1);
    layers.push(h);
    for l in 0..config.num_layers {
        let p = &params[2 + l * PARAMS_PER_LAYER..2 + (l + 1) * PARAMS_PER_LAYER];
        let a = g.layer_norm(h, p[0], p[1]);
        let q = g.matmul(a, p[2]);
        let q = g.add_row(q, p[3]);
        let k = g.matmul(a, p[4]);
        let k = g.add_row(k, p[5]);
        let v = g.matmul(a, p[6]);
        let v = g.add_row(v, p[7]);
        let att = g.attention(q, k, v, config.num_heads);
        let o = g.matmul(att, p[8]);
        let o = g.add_row(o, p[9]);
        h = g.add(h, o);
        let f = g.layer_norm(h, p[10], p[11]);
        let u = g.matmul(f, p[12]);
        let u = g.add_row(u, p[13]);
        let u = g.gelu(u);
        let y = g.matmul(u, p[14]);
        let y = g.add_row(y, p[15]);
        h = g.add(h, y);
        layers.push(h);
    }
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: 32,
            max_positions: 16,
            seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(toy()).unwrap();
        let b = init_model(toy()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = init_model(toy().with_seed(8)).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = toy();
        c.model_dim = 15;
        assert!(matches!(init_model(c), Err(Error::Config(_))));
        let mut c = toy();
        c.num_layers = 0;
        assert!(matches!(init_model(c), Err(Error::Config(_))));
        let mut c = toy();
        c.ffn_dim = 8;
        assert!(matches!(init_model(c), Err(Error::Config(_))));
    }

    #[test]
    fn encode_shape_and_purity() {
        let m = init_model(toy()).unwrap();
        let seq = TokenSeq::new(vec![0, 5, 6, 1, 7]).unwrap();
        let a = m.encode(&seq).unwrap();
        assert_eq!(a.values().shape(), &[3, 5, 16]);
        assert!(a.values().all_finite());
        let b = m.encode(&seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let m = init_model(toy()).unwrap();
        let long = TokenSeq::new(std::iter::once(0).chain(4..21).collect()).unwrap();
        assert!(matches!(m.encode(&long), Err(Error::Input(_))));
        let oov = TokenSeq::new(vec![0, 40]).unwrap();
        assert!(matches!(m.encode(&oov), Err(Error::Input(_))));
        assert!(TokenSeq::new(vec![]).is_err());
        assert!(TokenSeq::new(vec![5, 6]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model(toy()).unwrap();
        let bytes = m.to_bytes();
        let back = EncoderModel::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.fingerprint(), back.fingerprint());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EncoderModel::read_checkpoint(bad.as_slice()),
            Err(Error::Format { .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            EncoderModel::read_checkpoint(truncated),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn toy_param_count_by_hand() {
        let c = EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size: 16,
            max_positions: 32,
            seed: 0,
        };
        // embeddings 16*8 + 32*8; per layer: 2 norms (4*8), 4 projections
        // (4*64 + 4*8), ffn (8*32 + 32 + 32*8 + 8)
        let per_layer = 4 * 8 + 4 * 64 + 4 * 8 + 8 * 32 + 32 + 32 * 8 + 8;
        let expected = 16 * 8 + 32 * 8 + 2 * per_layer;
        assert_eq!(param_count(&c), expected as u64);
    }

    #[test]
    fn without_embedding_drops_first_slab() {
        let m = init_model(toy()).unwrap();
        let f = m.encode(&TokenSeq::new(vec![0, 4, 5]).unwrap()).unwrap();
        let g = f.without_embedding();
        assert_eq!(g.num_layers(), 2);
        assert_eq!(g.first_layer(), 1);
        assert_eq!(g.layer(1), f.layer(2));
    }
}
