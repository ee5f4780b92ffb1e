//! A small reverse-mode differentiation tape over [`Tensor`]s.
//!
//! Every forward computation in the model is recorded on a [`Graph`]. Nodes
//! are appended in evaluation order, so the reverse sweep in
//! [`Graph::backward`] simply walks the node list backwards.
//!
//! Parameters borrowed from a [`Weights`] store become leaves that carry
//! their index in the store; [`Gradients::param_grads`] maps them back.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::tensor::{gemm, Tensor};
use crate::weights::Weights;

/// Additive mask value standing in for −∞.
pub const NEG_INF: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Sum(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxXent { logits: Var, target: usize, probs: Vec<f64> },
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<'w> {
    nodes: Vec<Node<'w>>,
    params: HashMap<usize, Var>,
    track_params: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w> Graph<'w> {
    /// A graph whose parameter leaves require gradients.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), track_params: true }
    }

    /// A graph for inference only; no node requires a gradient.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), track_params: false }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that requires a gradient but is not tied to a parameter store.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for parameter `name`, created once per graph.
    pub fn param(&mut self, weights: &'w Weights, name: &str) -> Var {
        let idx = weights.index_of(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(&v) = self.params.get(&idx) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(weights.tensor(idx)),
            op: Op::Leaf,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(idx, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= v;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "bias row shape mismatch");
        let mut out = self.value(a).clone();
        let b = &self.value(row).data;
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat.data[i * c + j] = xh;
                out.data[i * c + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention with an additive mask.
    ///
    /// Rows whose mask entries are all at or below `NEG_INF / 2` produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor, heads: usize) -> Var {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        assert_eq!(dk, d, "key width differs from query width");
        assert_eq!(self.shape(v), (m, d), "value shape mismatch");
        assert_eq!(mask.shape(), (n, m), "mask shape mismatch");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Tensor::zeros(n, d);
        let mut scores = vec![0.0; m];
        for i in 0..n {
            let mrow = mask.row(i);
            if mrow.iter().all(|&x| x <= NEG_INF * 0.5) {
                continue;
            }
            for h in 0..heads {
                let off = h * dh;
                let qi = &qv.row(i)[off..off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    let kj = &kv.row(j)[off..off + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let s = (dot + mrow[j]) * scale;
                    scores[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                for j in 0..m {
                    p[j] = scores[j] / z;
                }
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..m {
                    let pj = p[j];
                    if pj == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[off..off + dh]) {
                        *o += pj * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "column slice out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for i in 0..av.rows {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Cross-entropy of a `1 × n` logit row against class `target`.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Var {
        let l = &self.value(logits).data;
        let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
        let probs: Vec<f64> = l.iter().map(|v| (v - mx).exp() / z).collect();
        let loss = -(l[target] - mx - z.ln());
        let ng = self.ng(logits);
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::SoftmaxXent { logits, target, probs }, ng)
    }

    /// Reverse sweep from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.ng(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, node: &Node<'_>, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum_with(grads, *a, |t| gemm(gout, false, bv, true, t, 1.0));
                self.accum_with(grads, *b, |t| gemm(av, true, gout, false, t, 1.0));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut g = gout.clone();
                    for (x, y) in g.data.iter_mut().zip(&bv.data) {
                        *x *= y;
                    }
                    self.accum(grads, *a, g);
                }
                if self.ng(*b) {
                    let mut g = gout.clone();
                    for (x, y) in g.data.iter_mut().zip(&av.data) {
                        *x *= y;
                    }
                    self.accum(grads, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, gout.clone());
                if self.ng(*row) {
                    let mut g = Tensor::zeros(1, gout.cols);
                    for i in 0..gout.rows {
                        for (x, y) in g.data.iter_mut().zip(gout.row(i)) {
                            *x += y;
                        }
                    }
                    self.accum(grads, *row, g);
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, gout.map(|v| v * s)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut g = gout.clone();
                for (gi, &x) in g.data.iter_mut().zip(&av.data) {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                self.accum(grads, *a, g);
            }
            Op::Exp(a) => {
                let mut g = gout.clone();
                for (gi, y) in g.data.iter_mut().zip(&node.value.data) {
                    *gi *= y;
                }
                self.accum(grads, *a, g);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accum(grads, *a, Tensor::filled(r, c, gout.data[0]));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = xhat.shape();
                let gv = &self.value(*gain).data;
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(r, c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let go = gout.row(i);
                        let xh = xhat.row(i);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = go[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let out = dx.row_mut(i);
                        for j in 0..c {
                            out[j] = rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.ng(*gain) {
                    let mut dg = Tensor::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data[j] += gout.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.accum(grads, *gain, dg);
                }
                if self.ng(*bias) {
                    let mut db = Tensor::zeros(1, c);
                    for i in 0..r {
                        for (x, y) in db.data.iter_mut().zip(gout.row(i)) {
                            *x += y;
                        }
                    }
                    self.accum(grads, *bias, db);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, gout, grads);
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i)[*start..*start + gout.cols].copy_from_slice(gout.row(i));
                    }
                    self.accum(grads, *a, g);
                }
            }
            Op::GatherRows(a, idx) => {
                self.accum_with(grads, *a, |t| {
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, y) in t.row_mut(i).iter_mut().zip(gout.row(o)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut g = Tensor::zeros(r, c);
                        for i in 0..r {
                            g.row_mut(i).copy_from_slice(&gout.row(i)[off..off + c]);
                        }
                        self.accum(grads, p, g);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let g = Tensor::from_vec(r, c, gout.data[off * c..(off + r) * c].to_vec());
                        self.accum(grads, p, g);
                    }
                    off += r;
                }
            }
            Op::SoftmaxXent { logits, target, probs } => {
                let mut g = Tensor::row_vector(probs.clone());
                g.data[*target] -= 1.0;
                g.scale_in_place(gout.data[0]);
                self.accum(grads, *logits, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(m, d);
        let mut dv = Tensor::zeros(m, d);
        let mut dp = vec![0.0; m];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let go = &gout.row(i)[off..off + dh];
                let mut dot = 0.0;
                for j in 0..m {
                    let vj = &vv.row(j)[off..off + dh];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    if p[j] != 0.0 {
                        for (x, y) in dv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                            *x += p[j] * y;
                        }
                    }
                }
                for j in 0..m {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.row(j)[off..off + dh];
                    for (x, y) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                        *x += ds * y;
                    }
                    let qi = &qv.row(i)[off..off + dh];
                    for (x, y) in dk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                        *x += ds * y;
                    }
                }
            }
        }
        self.accum(grads, q, dq);
        self.accum(grads, k, dk);
        self.accum(grads, v, dv);
    }

    /// Parameter-store index of each parameter leaf on this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&i, &v)| (i, v))
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulate parameter gradients into `acc`, which is laid out like the store.
    pub fn accumulate_params(&self, graph: &Graph<'_>, acc: &mut [Tensor]) {
        for (idx, var) in graph.param_vars() {
            if let Some(g) = self.get(var) {
                acc[idx].add_assign(g);
            }
        }
    }

    /// `(param index, gradient)` pairs for all parameters reached by the sweep.
    pub fn param_grads(&self, graph: &Graph<'_>) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = graph
            .param_vars()
            .filter_map(|(idx, var)| self.get(var).map(|g| (idx, g.clone())))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }
}
