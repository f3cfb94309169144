//! A linear gradient tape over [`Matrix`] values.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the backward pass. [`GradTape::backward`] walks the nodes in
//! reverse once, so each parameter receives exactly one accumulated gradient
//! per loss evaluation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, LayerNormCache, Matrix, Trans};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Shape description for a batched multi-head attention call.
///
/// Queries are `batch * query_len` rows, keys and values `batch * key_len`
/// rows; sample `s` owns the contiguous row block `s * len .. (s + 1) * len`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub query_len: usize,
    pub key_len: usize,
    /// One flag per key row; `true` hides that key (and its value) from every query.
    pub key_mask: Vec<bool>,
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Scale(Var, Matrix),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// A trainable tensor. Gradients come back from [`backward`](Self::backward)
    /// in registration order.
    pub fn param(&mut self, m: Matrix) -> Var {
        let v = self.push(m, Op::Param, true);
        self.params.push(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let g = self.grad_flag(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = tensor::relu(self.value(a));
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Relu(a), g)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1 / (1 - p)`. `p == 0` records nothing.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let (rows, cols) = self.value(a).shape();
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Matrix::from_vec(rows, cols, mask).expect("mask shape");
        let mut value = self.value(a).clone();
        for (o, m) in value.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Scale(a, mask), g)
    }

    /// Row-wise layer norm with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols()) || bv.shape() != (1, xv.cols()) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        let (value, cache) = tensor::layer_norm_with_cache(xv, gv.data(), bv.data(), eps);
        let g = self.grad_flag(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            g,
        ))
    }

    /// Output row `i` is row `rows[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        let mut value = Matrix::zeros(rows.len(), s.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= s.rows() {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for {} rows",
                    s.rows()
                )));
            }
            value.row_mut(i).copy_from_slice(s.row(r));
        }
        let g = self.grad_flag(&[src]);
        Ok(self.push(value, Op::Gather { src, rows }, g))
    }

    /// Batched scaled dot-product attention, split into `spec.heads` column
    /// blocks of width `d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if spec.heads == 0 || d % spec.heads != 0 || spec.query_len == 0 || spec.key_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: {} heads over width {d}",
                spec.heads
            )));
        }
        if kv.shape() != vv.shape() || kv.cols() != d {
            return Err(Error::Shape {
                op: "attention",
                left: kv.shape(),
                right: vv.shape(),
            });
        }
        let batch = qv.rows() / spec.query_len;
        if batch * spec.query_len != qv.rows()
            || batch * spec.key_len != kv.rows()
            || spec.key_mask.len() != kv.rows()
        {
            return Err(Error::Shape {
                op: "attention",
                left: qv.shape(),
                right: kv.shape(),
            });
        }
        let (value, probs) = attention_forward(qv, kv, vv, &spec, batch);
        let g = self.grad_flag(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }, g))
    }

    /// Attention weights recorded by an attention node, one `query_len x key_len`
    /// matrix per (sample, head) in sample-major order.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Matrix>> {
        match &self.nodes[node.0].op {
            Op::Attention { spec, probs, .. } => {
                let block = spec.query_len * spec.key_len;
                Some(
                    probs
                        .chunks(block)
                        .map(|c| Matrix::from_vec(spec.query_len, spec.key_len, c.to_vec()).unwrap())
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Mean cross-entropy of `softmax(logits)` rows against `targets`, as a `1 x 1` value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() || l.rows() == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: l.shape(),
                right: (targets.len(), 1),
            });
        }
        let probs = tensor::softmax_rows(l);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += tensor::cross_entropy(probs.row(r), t)?;
        }
        let value = Matrix::row_vector(vec![total / targets.len() as f64]);
        let g = self.grad_flag(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            g,
        ))
    }

    /// Back-propagates from a `1 x 1` node and returns one gradient per
    /// registered parameter, in registration order.
    pub fn backward(&self, loss: Var) -> Result<Vec<Matrix>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(dout);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = gemm(&dout, Trans::No, self.value(*b), Trans::Yes);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = gemm(self.value(*a), Trans::Yes, &dout, Trans::No);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, dout.clone());
                    }
                    accumulate(&mut grads, *a, dout);
                }
                Op::AddRow(a, row) => {
                    if self.nodes[row.0].needs_grad {
                        accumulate(&mut grads, *row, column_sums(&dout));
                    }
                    accumulate(&mut grads, *a, dout);
                }
                Op::Relu(a) => {
                    let mut da = dout;
                    for (g, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, mask) => {
                    let mut da = dout;
                    for (g, m) in da.data_mut().iter_mut().zip(mask.data()) {
                        *g *= m;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let g = self.value(*gain).data();
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, column_sums(&dout));
                    }
                    if self.nodes[gain.0].needs_grad {
                        let mut dg = Matrix::zeros(1, dout.cols());
                        for r in 0..dout.rows() {
                            for ((acc, dy), xh) in dg
                                .data_mut()
                                .iter_mut()
                                .zip(dout.row(r))
                                .zip(cache.normalized.row(r))
                            {
                                *acc += dy * xh;
                            }
                        }
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, layer_norm_input_grad(&dout, g, cache));
                    }
                }
                Op::Gather { src, rows } => {
                    let s = self.value(*src);
                    let mut ds = Matrix::zeros(s.rows(), s.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, g) in ds.row_mut(r).iter_mut().zip(dout.row(i)) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut grads, *src, ds);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        spec,
                        probs,
                        &dout,
                    );
                    for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.nodes[var.0].needs_grad {
                            accumulate(&mut grads, var, g);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = dout.get(0, 0) / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|p| {
                grads[p.0].take().unwrap_or_else(|| {
                    let (r, c) = self.value(*p).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (acc, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    out
}

fn layer_norm_input_grad(dout: &Matrix, gain: &[f64], cache: &LayerNormCache) -> Matrix {
    let n = dout.cols() as f64;
    let mut dx = Matrix::zeros(dout.rows(), dout.cols());
    for r in 0..dout.rows() {
        let xh = cache.normalized.row(r);
        let dxh: Vec<f64> = dout.row(r).iter().zip(gain).map(|(d, g)| d * g).collect();
        let sum: f64 = dxh.iter().sum();
        let dot: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[r];
        for ((o, d), x) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xh) {
            *o = is / n * (n * d - sum - x * dot);
        }
    }
    dx
}

/// Keys visible to one sample; a fully masked sample falls back to all keys.
fn visible_keys(mask: &[bool]) -> Vec<usize> {
    let open: Vec<usize> = (0..mask.len()).filter(|&j| !mask[j]).collect();
    if open.is_empty() {
        (0..mask.len()).collect()
    } else {
        open
    }
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &AttentionSpec,
    batch: usize,
) -> (Matrix, Vec<f64>) {
    let d = q.cols();
    let dh = d / spec.heads;
    let (lq, lk) = (spec.query_len, spec.key_len);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = vec![0.0; batch * spec.heads * lq * lk];
    let mut scores = vec![0.0; lk];

    for s in 0..batch {
        let keys = visible_keys(&spec.key_mask[s * lk..(s + 1) * lk]);
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            let pbase = (s * spec.heads + h) * lq * lk;
            for i in 0..lq {
                let qrow = &q.row(s * lq + i)[cols.clone()];
                scores.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                for &j in &keys {
                    let krow = &k.row(s * lk + j)[cols.clone()];
                    scores[j] = dot(qrow, krow) * scale;
                }
                tensor::softmax_in_place(&mut scores);
                probs[pbase + i * lk..pbase + (i + 1) * lk].copy_from_slice(&scores);
                let orow = &mut out.row_mut(s * lq + i)[cols.clone()];
                for &j in &keys {
                    let p = scores[j];
                    let vrow = &v.row(s * lk + j)[cols.clone()];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &AttentionSpec,
    probs: &[f64],
    dout: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let dh = d / spec.heads;
    let (lq, lk) = (spec.query_len, spec.key_len);
    let batch = q.rows() / lq;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    let mut dp = vec![0.0; lk];

    for s in 0..batch {
        let keys = visible_keys(&spec.key_mask[s * lk..(s + 1) * lk]);
        for h in 0..spec.heads {
            let cols = h * dh..(h + 1) * dh;
            let pbase = (s * spec.heads + h) * lq * lk;
            for i in 0..lq {
                let p = &probs[pbase + i * lk..pbase + (i + 1) * lk];
                let go = &dout.row(s * lq + i)[cols.clone()];
                // dP = dO · Vᵀ and dV += Pᵀ · dO
                let mut weighted = 0.0;
                for &j in &keys {
                    let vrow = &v.row(s * lk + j)[cols.clone()];
                    dp[j] = dot(go, vrow);
                    weighted += dp[j] * p[j];
                    let dvrow = &mut dv.row_mut(s * lk + j)[cols.clone()];
                    for (acc, g) in dvrow.iter_mut().zip(go) {
                        *acc += p[j] * g;
                    }
                }
                // softmax backward, then through the scaled QKᵀ product
                let qrow: Vec<f64> = q.row(s * lq + i)[cols.clone()].to_vec();
                let dqrow = &mut dq.row_mut(s * lq + i)[cols.clone()];
                for &j in &keys {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &k.row(s * lk + j)[cols.clone()];
                    for (acc, kx) in dqrow.iter_mut().zip(krow) {
                        *acc += ds * kx;
                    }
                    let dkrow = &mut dk.row_mut(s * lk + j)[cols.clone()];
                    for (acc, qx) in dkrow.iter_mut().zip(&qrow) {
                        *acc += ds * qx;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    /// Builds a scalar loss from a single parameter and checks its gradient.
    fn check<F>(param: &Matrix, build: F) -> f64
    where
        F: Fn(&mut GradTape, Var) -> Var,
    {
        let loss_of = |m: &Matrix| {
            let mut t = GradTape::new();
            let p = t.param(m.clone());
            let out = build(&mut t, p);
            t.value(out).get(0, 0)
        };
        let mut t = GradTape::new();
        let p = t.param(param.clone());
        let out = build(&mut t, p);
        let g = t.backward(out).unwrap().remove(0);
        // same measure as `grad_check`, but entries below 1e-6 are compared
        // absolutely: random inputs can make some gradients ~1e-9, where central
        // differences only resolve ~1e-11
        let eps = 1e-5;
        let mut probe = param.clone();
        let mut worst = 0.0_f64;
        for i in 0..param.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = loss_of(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = loss_of(&probe);
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst
    }

    /// Reduces any matrix to a scalar through a fixed random projection and a
    /// cross-entropy head, so every entry gets a distinct, nonzero gradient.
    fn reduce(t: &mut GradTape, x: Var, seed: u64) -> Var {
        let cols = t.value(x).cols();
        let rows = t.value(x).rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small weights keep every target probability above the loss clamp,
        // where finite differences would see a flat loss
        let proj = t.input(random(cols, 3, &mut rng).scale(0.1));
        let logits = t.matmul(x, proj).unwrap();
        let targets = (0..rows).map(|r| r % 3).collect();
        t.softmax_cross_entropy(logits, targets).unwrap()
    }

    #[test]
    fn relu_gradient_is_piecewise() {
        let mut t = GradTape::new();
        let p = t.param(Matrix::from_rows(&[[3.0, -3.0]]).unwrap());
        let r = t.relu(p);
        let w = t.input(Matrix::from_rows(&[[1.0], [1.0]]).unwrap());
        let y = t.matmul(r, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g[0].data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_backward_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let mut t = GradTape::new();
        let pa = t.param(a.clone());
        let pb = t.param(b.clone());
        let c = t.matmul(pa, pb).unwrap();
        let ones = t.input(Matrix::filled(2, 1, 1.0));
        let s = t.matmul(c, ones).unwrap();
        let rows = t.input(Matrix::filled(1, 3, 1.0));
        let total = t.matmul(rows, s).unwrap();
        let g = t.backward(total).unwrap();
        let dc = Matrix::filled(3, 2, 1.0);
        assert!(g[0].max_abs_diff(&tensor::matmul(&dc, &b.transpose()).unwrap()) < 1e-12);
        assert!(g[1].max_abs_diff(&tensor::matmul(&a.transpose(), &dc).unwrap()) < 1e-12);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = GradTape::new();
        let a = t.param(Matrix::filled(1, 2, 0.5));
        let _unused = t.param(Matrix::filled(2, 2, 1.0));
        let loss = t.softmax_cross_entropy(a, vec![0]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g[1], Matrix::zeros(2, 2));
    }

    #[test]
    fn fused_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut t = GradTape::new();
        let l = t.param(Matrix::from_rows(&[[0.2, -1.0, 0.7]]).unwrap());
        let loss = t.softmax_cross_entropy(l, vec![2]).unwrap();
        let g = t.backward(loss).unwrap().remove(0);
        let p = tensor::softmax_rows(t.value(l));
        assert!((g.get(0, 0) - p.get(0, 0)).abs() < 1e-15);
        assert!((g.get(0, 2) - (p.get(0, 2) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_sample_attends_everywhere() {
        let mut t = GradTape::new();
        let x = t.input(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let spec = AttentionSpec {
            heads: 1,
            query_len: 2,
            key_len: 2,
            key_mask: vec![true, true],
        };
        let out = t.attention(x, x, x, spec).unwrap();
        assert!(t.value(out).is_finite());
        for w in t.attention_weights(out).unwrap() {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_passes_grad_check(seed in 0u64..10_000, rows in 1usize..=6, cols in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(rows, cols, &mut rng);
            let other = random(rows, cols, &mut rng);
            let w = random(cols, 5, &mut rng);
            let row = random(1, cols, &mut rng);

            let e = check(&x, |t, p| { let q = t.input(w.clone()); let y = t.matmul(p, q).unwrap(); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "matmul lhs {e}");
            let e = check(&w, |t, p| { let q = t.input(x.clone()); let y = t.matmul(q, p).unwrap(); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "matmul rhs {e}");
            let e = check(&x, |t, p| { let q = t.input(other.clone()); let y = t.add(p, q).unwrap(); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "add {e}");
            let e = check(&row, |t, p| { let q = t.input(x.clone()); let y = t.add_row(q, p).unwrap(); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "add_row bias {e}");
            // keep entries away from the kink so central differences stay on one side
            let away = x.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
            let e = check(&away, |t, p| { let y = t.relu(p); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "relu {e}");
            if cols > 1 {
                let e = check(&x, |t, p| {
                    let g = t.input(row.clone());
                    let b = t.input(Matrix::zeros(1, cols));
                    let y = t.layer_norm(p, g, b, 1e-5).unwrap();
                    reduce(t, y, seed)
                });
                prop_assert!(e < 1e-4, "layer_norm input {e}");
                let e = check(&row, |t, p| {
                    let xi = t.input(x.clone());
                    let b = t.input(Matrix::zeros(1, cols));
                    let y = t.layer_norm(xi, p, b, 1e-5).unwrap();
                    reduce(t, y, seed)
                });
                prop_assert!(e < 1e-4, "layer_norm gain {e}");
            }
            let idx: Vec<usize> = (0..4).map(|i| (i * 7 + seed as usize) % rows).collect();
            let e = check(&x, |t, p| { let y = t.gather_rows(p, idx.clone()).unwrap(); reduce(t, y, seed) });
            prop_assert!(e < 1e-4, "gather {e}");
        }

        #[test]
        fn attention_passes_grad_check(seed in 0u64..10_000, heads in 1usize..=2, lq in 1usize..=3, mask_first in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (batch, lk, d) = (2, 3, 4);
            let q = random(batch * lq, d, &mut rng);
            let k = random(batch * lk, d, &mut rng);
            let v = random(batch * lk, d, &mut rng);
            let mut key_mask = vec![false; batch * lk];
            key_mask[0] = mask_first;
            let spec = AttentionSpec { heads, query_len: lq, key_len: lk, key_mask };
            for which in 0..3 {
                let base = [&q, &k, &v][which].clone();
                let e = check(&base, |t, p| {
                    let mut vars = [t.input(q.clone()), t.input(k.clone()), t.input(v.clone())];
                    vars[which] = p;
                    let y = t.attention(vars[0], vars[1], vars[2], spec.clone()).unwrap();
                    reduce(t, y, seed)
                });
                prop_assert!(e < 1e-4, "attention input {which}: {e}");
            }
        }
    }
}
