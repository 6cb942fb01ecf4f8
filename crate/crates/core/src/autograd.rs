//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every op appends a node holding its output value
//! and whatever it needs for the backward pass. [`Graph::backward`] walks the
//! nodes in exact reverse order of recording. A fresh graph is built for every
//! training step and for every inference forward.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{
    log_sum_exp, matmul, matmul_nt, matmul_tn, softmax, softmax_row, Real, Tensor,
};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a particular graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

/// Dense boolean attention pattern: `allow(i, j)` lets query `i` see key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttnMask>,
        probs: Vec<T>,
    },
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph for inference: same arithmetic, no backward bookkeeping.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.idx].needs_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("value is not recorded on this tape".into()));
        }
        Ok(())
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    /// Leaf holding a copy of parameter `index` of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: store.value(index).clone(),
            op: Op::Param(index),
            needs_grad: self.grad_enabled,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.cols();
        if bv.len() != d {
            return Err(Error::Dimension(format!(
                "add_bias: {} columns vs bias of {}",
                d,
                bv.len()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x · w + b` for `x[n×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension("layer_norm: gain/bias width".into()));
        }
        let eps = T::from_f64(LN_EPS);
        let dn = T::from_f64(d as f64);
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = xv.row(i);
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                var = var + (v - mean) * (v - mean);
            }
            var = var / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let (xhat, rstd) = if self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("embedding id {id} >= {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Multi-head scaled dot-product attention of `q[n×d]` over `k, v[m×d]`.
    ///
    /// Disallowed keys are skipped entirely, so a query's output depends only
    /// on the keys it may see, in key-index order.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttnMask>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let m = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != m {
            return Err(Error::Dimension("attention: q/k/v widths".into()));
        }
        if mask.rows() != n || mask.cols() != m {
            return Err(Error::Dimension(format!(
                "attention: mask {}×{} for {}×{} scores",
                mask.rows(),
                mask.cols(),
                n,
                m
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "{d} not divisible by {heads} heads"
            )));
        }
        let hd = d / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut out = vec![T::zero(); n * d];
        let keep = self.grad_enabled;
        let mut probs = if keep {
            vec![T::zero(); heads * n * m]
        } else {
            Vec::new()
        };
        let mut scores = vec![T::zero(); m];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let allow = mask.row(i);
                let qi = &qd[i * d + off..i * d + off + hd];
                let mut mx = T::neg_infinity();
                for j in 0..m {
                    if !allow[j] {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + hd];
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s = s + a * b;
                    }
                    s = s * scale;
                    scores[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                if mx == T::neg_infinity() {
                    // fully masked query row: output stays zero
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..m {
                    if allow[j] {
                        let e = (scores[j] - mx).exp();
                        scores[j] = e;
                        sum = sum + e;
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + hd];
                for j in 0..m {
                    if !allow[j] {
                        continue;
                    }
                    let p = scores[j] / sum;
                    if keep {
                        probs[(h * n + i) * m + j] = p;
                    }
                    let vj = &vd[j * d + off..j * d + off + hd];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_rows(self.value(b))?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::Index(format!(
                "slice_rows {start}..{end} of {} rows",
                av.rows()
            )));
        }
        let out = av.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `Σ_i w_i · −log softmax(logits_i[..classes])[target_i]`.
    ///
    /// Only the first `classes` columns take part in the normalisation, which
    /// lets the reserved MASK column be excluded. Rows with zero weight are
    /// skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        classes: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} rows, {} targets, {} weights",
                n,
                targets.len(),
                weights.len()
            )));
        }
        if classes == 0 || classes > c {
            return Err(Error::Dimension(format!(
                "cross_entropy: {classes} classes of {c}"
            )));
        }
        let mut total = T::zero();
        for i in 0..n {
            if targets[i] >= classes {
                return Err(Error::Index(format!(
                    "target {} out of range [0, {classes})",
                    targets[i]
                )));
            }
            if weights[i] == T::zero() {
                continue;
            }
            let row = &lv.row(i)[..classes];
            let nll = log_sum_exp(row) - row[targets[i]];
            total = total + weights[i] * nll;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                classes,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        self.check(loss)?;
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::full(self.nodes[loss.idx].value.shape(), T::one()));
        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Grads {
            graph: self.id,
            grads,
            params,
        })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.idx].value;
        let needs = |v: Var| self.nodes[v.idx].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, matmul_nt(g, val(*b)));
                }
                if needs(*b) {
                    accumulate(grads, *b, matmul_tn(val(*a), g));
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*b) {
                    let d = g.cols();
                    let mut gb = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    let shape = val(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::new(shape, gb).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|&x| x * *c).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = (g.rows(), g.cols());
                let gv = val(*gain).data();
                let dn = T::from_f64(d as f64);
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    for i in 0..n {
                        let gr = g.row(i);
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[i * d + j] = rstd[i] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(vec![n, d], dx).unwrap());
                }
                if needs(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] = dg[j] + g.row(i)[j] * xhat[i * d + j];
                        }
                    }
                    let shape = val(*gain).shape().to_vec();
                    accumulate(grads, *gain, Tensor::new(shape, dg).unwrap());
                }
                if needs(*bias) {
                    let mut db = vec![T::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] = db[j] + g.row(i)[j];
                        }
                    }
                    let shape = val(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gy, &v)| gy * gelu_grad(v))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (n, d) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let hd = d / heads;
                let scale = T::from_f64(1.0 / (hd as f64).sqrt());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); m * d];
                let mut dv = vec![T::zero(); m * d];
                let mut dp = vec![T::zero(); m];
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                for h in 0..*heads {
                    let off = h * hd;
                    for i in 0..n {
                        let allow = mask.row(i);
                        let gi = &gd[i * d + off..i * d + off + hd];
                        let pi = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let mut pdp = T::zero();
                        for j in 0..m {
                            if !allow[j] {
                                continue;
                            }
                            let vj = &vd[j * d + off..j * d + off + hd];
                            let mut s = T::zero();
                            for (&a, &b) in gi.iter().zip(vj) {
                                s = s + a * b;
                            }
                            dp[j] = s;
                            pdp = pdp + pi[j] * s;
                            let dvj = &mut dv[j * d + off..j * d + off + hd];
                            for (o, &a) in dvj.iter_mut().zip(gi) {
                                *o = *o + pi[j] * a;
                            }
                        }
                        let qi = &qd[i * d + off..i * d + off + hd];
                        for j in 0..m {
                            if !allow[j] {
                                continue;
                            }
                            let ds = pi[j] * (dp[j] - pdp) * scale;
                            let kj = &kd[j * d + off..j * d + off + hd];
                            let dqi = &mut dq[i * d + off..i * d + off + hd];
                            for (o, &a) in dqi.iter_mut().zip(kj) {
                                *o = *o + ds * a;
                            }
                            let dkj = &mut dk[j * d + off..j * d + off + hd];
                            for (o, &a) in dkj.iter_mut().zip(qi) {
                                *o = *o + ds * a;
                            }
                        }
                    }
                }
                if needs(*q) {
                    accumulate(grads, *q, Tensor::new(vec![n, d], dq).unwrap());
                }
                if needs(*k) {
                    accumulate(grads, *k, Tensor::new(vec![m, d], dk).unwrap());
                }
                if needs(*v) {
                    accumulate(grads, *v, Tensor::new(vec![m, d], dv).unwrap());
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let rb = val(*b).rows();
                if needs(*a) {
                    accumulate(grads, *a, g.slice_rows(0, ra));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.slice_rows(ra, ra + rb));
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mut dot = T::zero();
                    for (&a, &b) in yr.iter().zip(gr) {
                        dot = dot + a * b;
                    }
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                classes,
            } => {
                let lv = val(*logits);
                let c = lv.cols();
                let scale = g.item();
                let mut dl = Tensor::zeros(lv.shape());
                let mut p = vec![T::zero(); *classes];
                for i in 0..lv.rows() {
                    if weights[i] == T::zero() {
                        continue;
                    }
                    softmax_row(&lv.row(i)[..*classes], &mut p);
                    let w = weights[i] * scale;
                    let dst = &mut dl.data_mut()[i * c..i * c + classes];
                    for j in 0..*classes {
                        dst[j] = w * p[j];
                    }
                    dst[targets[i]] = dst[targets[i]] - w;
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

/// Gradients produced by one backward pass.
pub struct Grads<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Grads<T> {
    /// Gradient of `v`, or zeros-free `None` when `v` was unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// `(param index, gradient)` for every parameter reached from the loss.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_ref().map(|g| (p, g)))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (p, g) in self.param_grads() {
            store.grad_mut(p).add_assign(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn two_class_softmax_ce_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap());
        let loss = g.cross_entropy(z, &[1], &[1.0], 2).unwrap();
        let gr = g.backward(loss).unwrap();
        let p1 = 1.0 / (1.0 + (0.3f64 + 1.2).exp());
        let p0 = 1.0 - p1;
        let dz = gr.get(z).unwrap().data();
        assert!((dz[0] - p0).abs() < 1e-10);
        assert!((dz[1] - (p1 - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn ce_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(z, &[0, 1, 3], &[1.0; 3], 4).unwrap();
        assert!((g.value(l).item() - 3.0 * 4f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, &[1], &[1.0], 3).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let z = g.constant(Tensor::new(vec![2, 2], vec![5.0, -7.0, 1.0, 9.0]).unwrap());
        let l = g.cross_entropy(z, &[1, 0], &[0.0, 0.0], 2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        assert!(matches!(
            g.cross_entropy(z, &[2, 0], &[1.0, 1.0], 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.variable(Tensor::scalar(5.0));
        let l = g.scale(x, 4.0);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().item(), 4.0);
        assert!(gr.get(y).is_none());
    }

    #[test]
    fn foreign_loss_is_a_usage_error() {
        let mut a = Graph::<f64>::new();
        let b = Graph::<f64>::new();
        let x = a.variable(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::Usage(_))));
    }

    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                let fm = f(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn attention_layernorm_gelu_gradients_match_finite_differences() {
        let (n, m, d) = (3, 4, 4);
        let mask = Arc::new(AttnMask::from_fn(n, m, |i, j| j <= i + 1));
        let build = |x: &[f64], g: &mut Graph<f64>, vars: bool| {
            let t = |o: usize, r: usize, c: usize| {
                Tensor::new(vec![r, c], x[o..o + r * c].to_vec()).unwrap()
            };
            let mk = |g: &mut Graph<f64>, t: Tensor<f64>| {
                if vars {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            };
            let q = mk(g, t(0, n, d));
            let k = mk(g, t(12, m, d));
            let v = mk(g, t(28, m, d));
            let gain = mk(g, Tensor::new(vec![d], x[44..48].to_vec()).unwrap());
            let bias = mk(g, Tensor::new(vec![d], x[48..52].to_vec()).unwrap());
            let a = g.attention(q, k, v, 2, mask.clone()).unwrap();
            let ln = g.layer_norm(a, gain, bias).unwrap();
            let ge = g.gelu(ln);
            let sm = g.softmax(ge);
            let w = g.constant(
                Tensor::new(
                    vec![n, d],
                    (0..n * d).map(|i| i as f64 * 0.1 - 0.4).collect(),
                )
                .unwrap(),
            );
            let prod = g.mul(sm, w).unwrap();
            let s = g.sum(prod);
            let ce = g
                .cross_entropy(ge, &[0, 2, 3], &[1.0, 0.5, 2.0], d)
                .unwrap();
            let l = g.add(s, ce).unwrap();
            (vec![q, k, v, gain, bias], l)
        };
        let x: Vec<f64> = (0..52)
            .map(|i| ((i * 37 % 23) as f64 / 11.0) - 1.0)
            .collect();
        let mut g = Graph::new();
        let (vars, l) = build(&x, &mut g, true);
        let gr = g.backward(l).unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|v| gr.get(*v).unwrap().data().to_vec())
            .collect();
        let f = |p: &[f64]| {
            let mut g = Graph::inference();
            let (_, l) = build(p, &mut g, false);
            g.value(l).item()
        };
        let numeric = finite_diff(&f, &x, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {a} numeric {n}");
        }
    }
}
