//! A small reverse-mode differentiation tape over row-major matrices.
//!
//! Every node holds a `rows × cols` value. Vectors are `1 × n`. The op set is
//! exactly what the encoder, the poolers and the classification heads need;
//! backward passes are written by hand for each op.

use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Gelu(Var),
    Tanh(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Softmax(Var),
    WeightedSum {
        xs: Vec<Var>,
        w: Var,
    },
    Mean(Vec<Var>),
    MeanRows(Var),
    Row(Var, usize),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<S>,
    },
}

struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<S>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    /// Registers a tensor as a leaf, viewed as a matrix over its last axis.
    pub fn tensor(&mut self, t: &Tensor<f32>) -> Var {
        let (r, c) = t.matrix_dims();
        let value = t.data().iter().map(|&x| S::c(x as f64)).collect();
        self.push(r, c, value, Op::Leaf)
    }

    pub fn tensor_exact(&mut self, t: &Tensor<S>) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, t.data().to_vec(), Op::Leaf)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.dims(table);
        let src = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < rows, "gather index {id} out of range {rows}");
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        self.push(
            ids.len(),
            cols,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![S::zero(); n * m];
        matmul_into(av, bv, &mut out, n, k, m);
        self.push(n, m, out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape mismatch");
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| *x + *y)
            .collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row shape mismatch");
        let rv = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| *x + *y))
            .collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gain), (1, c));
        assert_eq!(self.dims(bias), (1, c));
        let eps = S::c(LN_EPS);
        let n = S::from_usize(c).unwrap();
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        self.push(r, c, out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(r, c, out, Op::Tanh(x))
    }

    /// Multi-head scaled dot-product attention. `q` is `n × d`, `k` and `v`
    /// are `m × d`; each head sees a contiguous `d / heads` column slice.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = self.dims(q);
        let (m, dk) = self.dims(k);
        assert_eq!(d, dk, "attention width mismatch");
        assert_eq!(self.dims(v), (m, d), "attention value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut probs = vec![S::zero(); heads * n * m];
        let mut out = vec![S::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qv[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    p[j] = dot(qi, kj) * scale;
                }
                softmax_in_place(p);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let pj = p[j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for t in 0..dh {
                        oi[t] += pj * vj[t];
                    }
                }
            }
        }
        self.push(
            n,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(x))
    }

    /// `Σ_i w[i] · xs[i]` with `w` a `1 × len(xs)` row.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Var {
        assert!(!xs.is_empty());
        assert_eq!(self.dims(w), (1, xs.len()));
        let (r, c) = self.dims(xs[0]);
        let wv = self.nodes[w.0].value.clone();
        let mut out = vec![S::zero(); r * c];
        for (x, &wi) in xs.iter().zip(&wv) {
            assert_eq!(self.dims(*x), (r, c));
            for (o, v) in out.iter_mut().zip(&self.nodes[x.0].value) {
                *o += wi * *v;
            }
        }
        self.push(
            r,
            c,
            out,
            Op::WeightedSum {
                xs: xs.to_vec(),
                w,
            },
        )
    }

    pub fn mean(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (r, c) = self.dims(xs[0]);
        let mut out = vec![S::zero(); r * c];
        for x in xs {
            assert_eq!(self.dims(*x), (r, c));
            for (o, v) in out.iter_mut().zip(&self.nodes[x.0].value) {
                *o += *v;
            }
        }
        let inv = S::one() / S::from_usize(xs.len()).unwrap();
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push(r, c, out, Op::Mean(xs.to_vec()))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        assert!(r > 0);
        let mut out = vec![S::zero(); c];
        for row in self.nodes[x.0].value.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = S::one() / S::from_usize(r).unwrap();
        out.iter_mut().for_each(|o| *o = *o * inv);
        self.push(1, c, out, Op::MeanRows(x))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(i < r);
        let out = self.nodes[x.0].value[i * c..(i + 1) * c].to_vec();
        self.push(1, c, out, Op::Row(x, i))
    }

    /// Softmax cross-entropy of a `1 × C` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(r, 1);
        assert!(label < c, "label {label} out of range {c}");
        let mut probs = self.nodes[logits.0].value.clone();
        let lse = log_sum_exp(&probs);
        let loss = lse - probs[label];
        softmax_in_place(&mut probs);
        self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// Back-propagates from a scalar node, seeding its gradient with `seed`.
    pub fn backward(&self, root: Var, seed: S) -> Grads<S> {
        assert_eq!(self.dims(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Gather { table, ids } => {
                    let c = node.cols;
                    let dt = self.grad_buf(&mut grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for t in 0..c {
                            dt[id * c + t] += g[r * c + t];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.dims(*a);
                    let m = node.cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let da = self.grad_buf(&mut grads, *a);
                        for i in 0..n {
                            let gi = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                da[i * k + p] += dot(gi, &bv[p * m..(p + 1) * m]);
                            }
                        }
                    }
                    let db = self.grad_buf(&mut grads, *b);
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            let row = &mut db[p * m..(p + 1) * m];
                            for j in 0..m {
                                row[j] += aip * gi[j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(self.grad_buf(&mut grads, *a), &g);
                    accumulate(self.grad_buf(&mut grads, *b), &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(self.grad_buf(&mut grads, *a), &g);
                    let c = node.cols;
                    let dr = self.grad_buf(&mut grads, *row);
                    for chunk in g.chunks(c) {
                        accumulate(dr, chunk);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = node.cols;
                    let gv = &self.nodes[gain.0].value;
                    {
                        let dg = self.grad_buf(&mut grads, *gain);
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    {
                        let db = self.grad_buf(&mut grads, *bias);
                        for gr in g.chunks(c) {
                            accumulate(db, gr);
                        }
                    }
                    let n = S::from_usize(c).unwrap();
                    let dx = self.grad_buf(&mut grads, *x);
                    let mut dh = vec![S::zero(); c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hr[j];
                        }
                        let m1 = sum_dh / n;
                        let m2 = sum_dh_h / n;
                        let is = inv_std[r];
                        for j in 0..c {
                            dx[r * c + j] += is * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = self.grad_buf(&mut grads, *x);
                    for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(&g) {
                        *d += gi * gelu_grad(v);
                    }
                }
                Op::Tanh(x) => {
                    let dx = self.grad_buf(&mut grads, *x);
                    for ((d, &y), &gi) in dx.iter_mut().zip(&node.value).zip(&g) {
                        *d += gi * (S::one() - y * y);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Softmax(x) => {
                    let c = node.cols;
                    let dx = self.grad_buf(&mut grads, *x);
                    for (r, (yr, gr)) in node.value.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::WeightedSum { xs, w } => {
                    let wv = self.nodes[w.0].value.clone();
                    let mut dw = vec![S::zero(); xs.len()];
                    for (i, x) in xs.iter().enumerate() {
                        dw[i] = dot(&g, &self.nodes[x.0].value);
                        let dx = self.grad_buf(&mut grads, *x);
                        for (d, &gi) in dx.iter_mut().zip(&g) {
                            *d += wv[i] * gi;
                        }
                    }
                    accumulate(self.grad_buf(&mut grads, *w), &dw);
                }
                Op::Mean(xs) => {
                    let inv = S::one() / S::from_usize(xs.len()).unwrap();
                    for x in xs {
                        let dx = self.grad_buf(&mut grads, *x);
                        for (d, &gi) in dx.iter_mut().zip(&g) {
                            *d += gi * inv;
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.dims(*x);
                    let inv = S::one() / S::from_usize(r).unwrap();
                    let dx = self.grad_buf(&mut grads, *x);
                    for chunk in dx.chunks_mut(c) {
                        for (d, &gi) in chunk.iter_mut().zip(&g) {
                            *d += gi * inv;
                        }
                    }
                }
                Op::Row(x, i) => {
                    let c = node.cols;
                    let dx = self.grad_buf(&mut grads, *x);
                    accumulate(&mut dx[i * c..(i + 1) * c], &g);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let dl = self.grad_buf(&mut grads, *logits);
                    for (j, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { S::one() } else { S::zero() };
                        *d += g[0] * (p - target);
                    }
                }
            }
        }
        Grads { grads }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<S>>], v: Var) -> &'a mut Vec<S> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<S>>],
        g: &[S],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
    ) {
        let (n, d) = self.dims(q);
        let (m, _) = self.dims(k);
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut dq = vec![S::zero(); n * d];
        let mut dk = vec![S::zero(); m * d];
        let mut dv = vec![S::zero(); m * d];
        let mut dp = vec![S::zero(); m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let gi = &g[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for t in 0..dh {
                        dvj[t] += p[j] * gi[t];
                    }
                }
                let s = dot(p, &dp);
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for t in 0..dh {
                        dqi[t] += ds * kj[t];
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for t in 0..dh {
                        dkj[t] += ds * qi[t];
                    }
                }
            }
        }
        accumulate(self.grad_buf(grads, q), &dq);
        accumulate(self.grad_buf(grads, k), &dk);
        accumulate(self.grad_buf(grads, v), &dv);
    }
}

fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[inline]
fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let s: S = x.iter().map(|v| (*v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<S: Scalar>(x: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

// tanh approximation of GELU
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::c(0.5);
    let inner = S::c(GELU_K) * (x + S::c(GELU_C) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::c(0.5);
    let inner = S::c(GELU_K) * (x + S::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = S::c(GELU_K) * (S::one() + S::c(3.0 * GELU_C) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}
