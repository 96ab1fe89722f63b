//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use amortenc::encoder::{EncoderConfig, EncoderModel, CLS, SEP};
use amortenc::graph::Graph;
use amortenc::pooling::{LayerPooling, MhaParams, PoolingSpec, PositionPooling};
use amortenc::rng;
use amortenc::tensor::Tensor;
use amortenc::training::{multitask_step_loss, Head, HeadVars};
use rand::Rng as _;

/// Weights drawn wider than the default init, gains around 1.
pub fn spread_params(config: &EncoderConfig, seed: u64, std: f64) -> Vec<Tensor> {
    let mut r = rng::seeded(seed);
    config
        .param_layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = rng::normal_tensor(&mut r, shape, std);
            if name.ends_with("gain") {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 1.0 + x).collect())
                    .unwrap()
            } else {
                t
            }
        })
        .collect()
}

pub fn spread_model(config: EncoderConfig, seed: u64) -> EncoderModel {
    let params = spread_params(&config, seed, 0.3);
    EncoderModel::from_params(config, params).unwrap()
}

/// Which part of the model a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Part {
    Encoder,
    LearnedComb,
    Mha,
    Head,
}

/// A small multi-task loss in f64: encoder, then three heads covering every
/// pooling variant.
pub struct GradCase {
    pub config: EncoderConfig,
    pub specs: Vec<PoolingSpec>,
    pub params: Vec<Tensor<f64>>,
    pub parts: Vec<Part>,
    head_sizes: Vec<usize>,
    pub batches: Vec<Vec<(Vec<u32>, usize)>>,
    pub alphas: Vec<f64>,
}

impl GradCase {
    /// L=2, d=8, h=2, sequences of 6 tokens.
    pub fn new(seed: u64) -> Self {
        let config = EncoderConfig::new(2, 8, 2).with_vocab(16).with_max_positions(8);
        let (d, n) = (8, 6);
        let mut r = rng::seeded(seed ^ 0x9e37);
        let mut wide = |shape: Vec<usize>| rng::normal_tensor(&mut r, shape, 0.5);
        let mha = MhaParams {
            query: wide(vec![d]),
            key_proj: wide(vec![d, d]),
            value_proj: wide(vec![d, d]),
            out_proj: wide(vec![d, d]),
            num_heads: 2,
        };
        let specs = vec![
            PoolingSpec::new(
                LayerPooling::LearnedComb {
                    logits: wide(vec![3]),
                },
                PositionPooling::Mha(mha),
            ),
            PoolingSpec::new(LayerPooling::Avg { m: 2 }, PositionPooling::Avg),
            PoolingSpec::new(LayerPooling::Last, PositionPooling::Cls),
        ];
        let classes = [2, 3, 2];
        let mut params: Vec<Tensor<f64>> = spread_params(&config, seed, 0.3)
            .iter()
            .map(|t| t.cast())
            .collect();
        let mut parts = vec![Part::Encoder; params.len()];
        let mut head_sizes = Vec::new();
        for (spec, &c) in specs.iter().zip(&classes) {
            let mut head = Head::init(d, c, spec.clone(), &mut rng::seeded(seed + c as u64));
            head.b1 = wide(vec![d]);
            head.b2 = wide(vec![c]);
            let tensors = head.params();
            head_sizes.push(tensors.len());
            let pool = tensors.len() - 4;
            for (i, t) in tensors.into_iter().enumerate() {
                params.push(t.cast());
                parts.push(match (&spec.layer, i) {
                    (_, i) if i >= pool => Part::Head,
                    (LayerPooling::LearnedComb { .. }, 0) => Part::LearnedComb,
                    _ => Part::Mha,
                });
            }
        }
        let mut r = rng::seeded(seed ^ 0x51);
        let batches = classes
            .iter()
            .map(|&c| {
                (0..3)
                    .map(|_| {
                        let mut ids = vec![CLS];
                        ids.extend((0..n - 2).map(|_| r.random_range(4..16u32)));
                        ids.insert(3, SEP);
                        (ids, r.random_range(0..c))
                    })
                    .collect()
            })
            .collect();
        Self {
            config,
            specs,
            params,
            parts,
            head_sizes,
            batches,
            alphas: vec![0.5, 0.3, 0.2],
        }
    }

    pub fn from_parts(
        config: EncoderConfig,
        specs: Vec<PoolingSpec>,
        head_sizes: Vec<usize>,
        params: Vec<Tensor<f64>>,
        batches: Vec<Vec<(Vec<u32>, usize)>>,
        alphas: Vec<f64>,
    ) -> Self {
        let parts = vec![Part::Head; params.len()];
        Self {
            config,
            specs,
            params,
            parts,
            head_sizes,
            batches,
            alphas,
        }
    }

    /// Loss value and, if asked, the analytic gradient of every tensor.
    pub fn eval(&self, params: &[Tensor<f64>], with_grads: bool) -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = params.iter().map(|t| g.tensor_exact(t)).collect();
        let ne = self.config.param_layout().len();
        let mut heads = Vec::new();
        let mut at = ne;
        for &k in &self.head_sizes {
            let v = &vars[at..at + k];
            heads.push(HeadVars {
                pooling: v[..k - 4].to_vec(),
                w1: v[k - 4],
                b1: v[k - 3],
                w2: v[k - 2],
                b2: v[k - 1],
            });
            at += k;
        }
        let pairs: Vec<_> = self.specs.iter().zip(heads.iter()).collect();
        let batches: Vec<Vec<(&[u32], usize)>> = self
            .batches
            .iter()
            .map(|b| b.iter().map(|(ids, l)| (ids.as_slice(), *l)).collect())
            .collect();
        let (loss, _) =
            multitask_step_loss(&mut g, &self.config, &vars[..ne], &pairs, &batches, &self.alphas)
                .unwrap();
        let value = g.value(loss)[0];
        if !with_grads {
            return (value, Vec::new());
        }
        let grads = g.backward(loss, 1.0);
        let out = vars
            .iter()
            .zip(params)
            .map(|(v, t)| grads.get(*v).map_or(vec![0.0; t.len()], |g| g.to_vec()))
            .collect();
        (value, out)
    }

    /// Central differences on up to `per_tensor` coordinates of each tensor.
    /// Returns the norm-wise relative error per part.
    pub fn check(&self, per_tensor: usize, h: f64) -> Vec<(Part, f64)> {
        let (_, analytic) = self.eval(&self.params, true);
        let mut r = rng::seeded(7);
        let mut acc: std::collections::BTreeMap<Part, (f64, f64)> = Default::default();
        for (ti, t) in self.params.iter().enumerate() {
            let coords: Vec<usize> = if t.len() <= per_tensor {
                (0..t.len()).collect()
            } else {
                (0..per_tensor).map(|_| r.random_range(0..t.len())).collect()
            };
            for j in coords {
                let mut p = self.params.clone();
                p[ti].data_mut()[j] += h;
                let up = self.eval(&p, false).0;
                p[ti].data_mut()[j] -= 2.0 * h;
                let down = self.eval(&p, false).0;
                let numeric = (up - down) / (2.0 * h);
                let e = acc.entry(self.parts[ti]).or_default();
                e.0 += (analytic[ti][j] - numeric).powi(2);
                e.1 += analytic[ti][j].powi(2).max(numeric.powi(2));
            }
        }
        acc.into_iter()
            .map(|(part, (num, den))| (part, (num / den.max(1e-300)).sqrt()))
            .collect()
    }
}

/// Direct f64 evaluation of `out_proj · concat_h(Σ_j softmax_j(q_h·k_jh/√dh) v_jh)`.
pub fn mha_oracle(x: &[Vec<f64>], p: &MhaParams) -> Vec<f64> {
    let d = p.dim();
    let dh = d / p.num_heads;
    let proj = |w: &Tensor, row: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| (0..d).map(|i| row[i] * w.data()[i * d + j] as f64).sum())
            .collect()
    };
    let keys: Vec<Vec<f64>> = x.iter().map(|r| proj(&p.key_proj, r)).collect();
    let vals: Vec<Vec<f64>> = x.iter().map(|r| proj(&p.value_proj, r)).collect();
    let q: Vec<f64> = p.query.data().iter().map(|&v| v as f64).collect();
    let mut att = vec![0.0; d];
    for h in 0..p.num_heads {
        let s: Vec<f64> = keys
            .iter()
            .map(|k| (0..dh).map(|t| q[h * dh + t] * k[h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for t in 0..dh {
            att[h * dh + t] = s.iter().zip(&vals).map(|(sj, v)| sj.exp() / z * v[h * dh + t]).sum();
        }
    }
    proj(&p.out_proj, &att)
}

pub fn example_mha() -> MhaParams {
    MhaParams {
        query: t(vec![4], vec![0.5, -1.0, 0.25, 2.0]),
        key_proj: t(vec![4, 4], (0..16).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect()),
        value_proj: t(vec![4, 4], (0..16).map(|i| ((i * 3 % 7) as f32 - 3.0) * 0.2).collect()),
        out_proj: t(vec![4, 4], (0..16).map(|i| ((i % 4) as f32 - 1.5) * 0.4).collect()),
        num_heads: 2,
    }
}

fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}
