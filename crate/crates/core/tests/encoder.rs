//! Encoder forward pass against a naive f64 reimplementation.

use amortenc::encoder::{init_model, EncoderConfig, EncoderModel, TokenSeq, CLS, SEP};
use amortenc::rng;
use amortenc::tensor::Tensor;
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|i| (0..cols).map(|j| t.data()[i * cols + j] as f64).collect())
        .collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / s * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let (n, d) = (q.len(), q[0].len());
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Pre-norm blocks; returns the embedding output followed by every layer.
fn oracle(model: &EncoderModel, ids: &[u32]) -> Vec<Mat> {
    let c = model.config();
    let (d, f) = (c.model_dim, c.ffn_dim);
    let p = model.params();
    let tok = mat(&p[0], c.vocab_size, d);
    let pos = mat(&p[1], c.max_positions, d);
    let mut h: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..d).map(|j| tok[t as usize][j] + pos[i][j]).collect())
        .collect();
    let mut out = vec![h.clone()];
    for l in 0..c.num_layers {
        let w = &p[2 + 16 * l..2 + 16 * (l + 1)];
        let a = layer_norm(&h, &vecf(&w[0]), &vecf(&w[1]));
        let q = affine(&a, &mat(&w[2], d, d), &vecf(&w[3]));
        let k = affine(&a, &mat(&w[4], d, d), &vecf(&w[5]));
        let v = affine(&a, &mat(&w[6], d, d), &vecf(&w[7]));
        let att = attention(&q, &k, &v, c.num_heads);
        h = add(&h, &affine(&att, &mat(&w[8], d, d), &vecf(&w[9])));
        let u = affine(
            &layer_norm(&h, &vecf(&w[10]), &vecf(&w[11])),
            &mat(&w[12], d, f),
            &vecf(&w[13]),
        );
        let u: Mat = u.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        h = add(&h, &affine(&u, &mat(&w[14], f, d), &vecf(&w[15])));
        out.push(h.clone());
    }
    out
}

/// Model with non-trivial layer-norm gains and larger weights than the init.
fn spread_model(config: EncoderConfig, seed: u64) -> EncoderModel {
    let mut r = rng::seeded(seed);
    let params = config
        .param_layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = rng::normal_tensor(&mut r, shape, 0.3);
            if name.ends_with("gain") {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 1.0 + x).collect()).unwrap()
            } else {
                t
            }
        })
        .collect();
    EncoderModel::from_params(config, params).unwrap()
}

fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
    let den: f64 = want.iter().map(|b| b * b).sum();
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn forward_matches_oracle() {
    let config = EncoderConfig::new(3, 16, 4).with_vocab(40).with_max_positions(12);
    let model = spread_model(config, 11);
    let ids = vec![CLS, 9, 17, 4, 33, SEP, 21, 8, 12];
    let layers = model.encode(&TokenSeq::new(ids.clone()).unwrap()).unwrap();
    let want = oracle(&model, &ids);
    assert_eq!(layers.num_layers(), 4);
    for (l, w) in want.iter().enumerate() {
        let flat: Vec<f64> = w.iter().flatten().copied().collect();
        let e = rel_err(layers.layer(l), &flat);
        assert!(e <= 1e-5, "layer {l}: relative error {e:e}");
    }
}

#[test]
fn default_init_statistics() {
    let model = init_model(EncoderConfig::new(2, 32, 4).with_seed(5)).unwrap();
    let emb = &model.params()[0];
    let n = emb.len() as f64;
    let mean = emb.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let sd = (emb.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002, "{mean}");
    assert!((sd - 0.02).abs() < 0.002, "{sd}");
}

#[test]
fn checkpoint_round_trip_preserves_fingerprint() {
    let model = init_model(EncoderConfig::new(2, 8, 2).with_vocab(20).with_seed(3)).unwrap();
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf).unwrap();
    let back = EncoderModel::read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.fingerprint(), model.fingerprint());
    assert_eq!(back.to_bytes(), model.to_bytes());
    buf.truncate(buf.len() - 3);
    assert!(EncoderModel::read_checkpoint(buf.as_slice()).is_err());
}

#[test]
fn rejects_out_of_range_input() {
    let model = init_model(EncoderConfig::new(1, 8, 2).with_vocab(10).with_max_positions(4)).unwrap();
    assert!(model.encode(&TokenSeq::new(vec![CLS, 10]).unwrap()).is_err());
    assert!(model.encode(&TokenSeq::new(vec![CLS, 4, 5, 6, 7]).unwrap()).is_err());
    assert!(TokenSeq::new(vec![]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_agrees_on_random_sequences(
        seed in 0u64..1000,
        body in proptest::collection::vec(4u32..24, 0..9),
    ) {
        let mut ids = vec![CLS];
        ids.extend(body);
        let config = EncoderConfig::new(2, 8, 2).with_vocab(24).with_max_positions(10);
        let model = spread_model(config, seed);
        let layers = model.encode(&TokenSeq::new(ids.clone()).unwrap()).unwrap();
        let want = oracle(&model, &ids);
        let last: Vec<f64> = want[2].iter().flatten().copied().collect();
        prop_assert!(rel_err(layers.layer(2), &last) <= 1e-5);
    }

    #[test]
    fn encoding_is_deterministic(seed in 0u64..1000) {
        let model = init_model(EncoderConfig::new(1, 8, 2).with_vocab(16).with_seed(seed)).unwrap();
        let seq = TokenSeq::new(vec![CLS, 5, 6, SEP]).unwrap();
        prop_assert_eq!(model.encode(&seq).unwrap(), model.encode(&seq).unwrap());
        let again = init_model(EncoderConfig::new(1, 8, 2).with_vocab(16).with_seed(seed)).unwrap();
        prop_assert_eq!(again.fingerprint(), model.fingerprint());
    }
}
