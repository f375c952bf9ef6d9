//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! Ops are coarse-grained (matmul, layer norm, fused causal attention, ...)
//! and each one stores whatever its backward rule needs. Nodes are appended
//! in evaluation order, so a reverse sweep over the node list is a valid
//! topological order for the chain rule.

use std::collections::BTreeMap;

use super::kernels::{self, dot, gelu, gelu_grad, logsumexp};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type ParamId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    AddRowBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Gelu(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root keyed by parameter id.
///
/// Every parameter registered on the graph has an entry, zero-filled when
/// the root does not depend on it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor> {
        self.map
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// A recorded computation. Build it forward with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    checked: bool,
    fault: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that validates every op output for NaN/Inf.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    /// First non-finite op seen in checked mode.
    pub fn fault(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if self.checked && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, "constant")
    }

    /// Registers a trainable leaf. Registering the same id twice returns the
    /// original node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id), "param");
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let shape = src.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, factor), "scale")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * x).collect();
        let shape = src.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Square(a), "square")
    }

    /// Sum of same-shaped nodes, accumulated in slice order.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n: no inputs");
        let shape = self.shape(parts[0]).to_vec();
        let mut acc = vec![0.0; self.value(parts[0]).numel()];
        for &p in parts {
            assert_eq!(self.shape(p), &shape[..], "add_n: shape mismatch");
            for (a, v) in acc.iter_mut().zip(self.value(p).data()) {
                *a += v;
            }
        }
        self.push(Tensor::new(shape, acc).unwrap(), Op::AddN(parts.to_vec()), "add_n")
    }

    /// `x[T×d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert_eq!(self.shape(bias), &[cols], "add_row_bias: bias shape");
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..rows {
            for (o, bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(
            Tensor::matrix(rows, cols, data).unwrap(),
            Op::AddRowBias { x, bias },
            "add_row_bias",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out).unwrap(), Op::MatMul(a, b), "matmul")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| gelu(x)).collect();
        let shape = src.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu(a), "gelu")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert_eq!(self.shape(gamma), &[cols], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), &[cols], "layer_norm: beta shape");
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        self.push(
            Tensor::matrix(rows, cols, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head causal scaled dot-product attention over `[T×d]` inputs.
    /// Row `i` attends to rows `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (t, d) = self.value(q).dims2();
        assert_eq!(self.value(k).dims2(), (t, d), "attention: k shape");
        assert_eq!(self.value(v).dims2(), (t, d), "attention: v shape");
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qs[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = scale * dot(qi, &ks[j * d + off..j * d + off + dh]);
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let p = scores[j] / z;
                    prow[j] = p;
                    for (o, vv) in orow.iter_mut().zip(&vs[j * d + off..j * d + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        self.push(
            Tensor::matrix(t, d, out).unwrap(),
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "causal_attention",
        )
    }

    /// Row-wise log-softmax of a `[T×V]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = log_softmax_rows(self.value(x));
        self.push(value, Op::LogSoftmax(x), "log_softmax")
    }

    /// Rows of `table[N×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (n, d) = self.value(table).dims2();
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < n, "embedding: id {id} out of range {n}");
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::matrix(ids.len(), d, out).unwrap(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Picks `x[t, idx[t]]` from a `[T×V]` matrix, giving a `[T]` vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let (t, v) = self.value(x).dims2();
        assert_eq!(idx.len(), t, "gather: need one index per row");
        let xs = self.value(x).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < v, "gather: index {c} out of range {v}");
                xs[r * v + c]
            })
            .collect();
        self.push(
            Tensor::vector(out),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            "gather",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// `Σ_j weights[j] · x[j]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        assert_eq!(self.value(x).numel(), weights.len(), "weighted_sum: length");
        let s = dot(self.value(x).data(), weights);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            "weighted_sum",
        )
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::log_sigmoid(v)).collect();
        let shape = src.shape().to_vec();
        self.push(Tensor::new(shape, data).unwrap(), Op::LogSigmoid(x), "log_sigmoid")
    }

    /// Gradients of the scalar `root` with respect to every registered
    /// parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.fault()?;
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let shape = node.value.shape().to_vec();
                    out.insert(*id, Tensor::new(shape, g).unwrap());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Square(a) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(av).map(|(g, a)| 2.0 * a * g).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddN(parts) => {
                    for p in parts {
                        accumulate(&mut grads, *p, &g);
                    }
                }
                Op::AddRowBias { x, bias } => {
                    let (rows, cols) = node.value.dims2();
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for (o, v) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let (_, n) = self.value(*b).dims2();
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(&g, self.value(*b).data(), &mut ga, m, k, n);
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), &g, &mut gb, m, k, n);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(av).map(|(g, &x)| g * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = node.value.dims2();
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbeta[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gamma, &gg);
                    accumulate(&mut grads, *beta, &gbeta);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (t, d) = node.value.dims2();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qs, ks, vs) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let mut gq = vec![0.0; t * d];
                    let mut gk = vec![0.0; t * d];
                    let mut gv = vec![0.0; t * d];
                    let mut dp = vec![0.0; t];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..t {
                            let go = &g[i * d + off..i * d + off + dh];
                            let prow = &probs[(h * t + i) * t..(h * t + i) * t + t];
                            let mut sbar = 0.0;
                            for j in 0..=i {
                                dp[j] = dot(go, &vs[j * d + off..j * d + off + dh]);
                                sbar += prow[j] * dp[j];
                                for (o, gov) in gv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                    *o += prow[j] * gov;
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - sbar) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[i * d + off + c] += ds * ks[j * d + off + c];
                                    gk[j * d + off + c] += ds * qs[i * d + off + c];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, &gq);
                    accumulate(&mut grads, *k, &gk);
                    accumulate(&mut grads, *v, &gv);
                }
                Op::LogSoftmax(x) => {
                    let (rows, cols) = node.value.dims2();
                    let y = node.value.data();
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for c in 0..cols {
                            gx[r * cols + c] = gr[c] - y[r * cols + c].exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Embedding { table, ids } => {
                    let (n, d) = self.value(*table).dims2();
                    let mut gt = vec![0.0; n * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, &gt);
                }
                Op::Gather { x, idx } => {
                    let (rows, cols) = self.value(*x).dims2();
                    let mut gx = vec![0.0; rows * cols];
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::WeightedSum { x, weights } => {
                    let gx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g * kernels::sigmoid(-v))
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }

        for (&id, &var) in &self.params {
            out.entry(id)
                .or_insert_with(|| Tensor::zeros(self.value(var).shape()));
        }
        Ok(Gradients { map: out })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.dims2();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let lse = logsumexp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::matrix(rows, cols, out).unwrap()
}

/// Row-wise log-softmax of a `[T×V]` tensor, rejecting non-finite input.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "log_softmax expects [T×V], got {:?}",
            logits.shape()
        )));
    }
    if logits.shape()[1] < 2 {
        return Err(Error::Shape("log_softmax needs at least 2 classes".into()));
    }
    logits.ensure_finite("log_softmax")?;
    Ok(log_softmax_rows(logits))
}
