//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly and appends one node. [`Tape::backward`]
//! walks the nodes in exact reverse order and deposits gradients into the
//! trainable parameters of a [`ParamStore`]. Frozen parameters enter the tape
//! as constants: no gradient is ever computed for them, and subgraphs that
//! only depend on constants are skipped entirely during the backward sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Parameter values live in the store and are
    /// untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Register a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(shape, data), Op::Add(a, b), ng))
    }

    /// Adds a `[c]` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::with_shape(shape, data), Op::AddRow(x, bias), ng))
    }

    /// `x · W + b` for a `[.. × in]` input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::with_shape(shape, data), Op::Scale(x, c), ng)
    }

    /// Multiply by a differentiable `[1]` scalar.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, s]);
        Ok(self.push(Tensor::with_shape(shape, data), Op::MulScalar(x, s), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::with_shape(shape, data), Op::Mul(a, b), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::with_shape(shape, data), Op::Relu(x), ng)
    }

    /// Row-wise `(x − mean)/sqrt(var + eps) · gamma + beta` with the biased
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::with_shape(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::with_shape(shape, data), Op::SoftmaxRows(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::with_shape(vec![rows, len], data),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::with_shape(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::with_shape(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Average over rows: `[T × c] → [1 × c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= rows as f64;
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::with_shape(vec![1, cols], data), Op::MeanRows(x), ng)
    }

    /// `Σ weights[i] · inputs[i]` for equally shaped inputs and a `[N]` weight
    /// vector.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        if inputs.is_empty() || self.value(weights).len() != inputs.len() {
            return Err(Error::shape(
                "weighted_sum",
                &[inputs.len()],
                self.shape(weights),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        let w = self.value(weights).data();
        let mut data = vec![0.0; self.value(inputs[0]).len()];
        for (i, &h) in inputs.iter().enumerate() {
            if self.shape(h) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(h)));
            }
            for (o, v) in data.iter_mut().zip(self.value(h).data()) {
                *o += w[i] * v;
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let ng = self.ng(&deps);
        Ok(self.push(
            Tensor::with_shape(shape, data),
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = (t.rows(), t.cols());
        if t.shape().len() != 2 || labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelRange {
                label: bad,
                classes: k,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            let lse = log_sum_exp(row);
            loss += lse - row[labels[r]];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Smallest `|pre-activation|` over every relu on the tape; `None` if the
    /// tape holds no relu.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Backpropagate from a scalar `loss`, accumulating into the `grad` slot
    /// of every trainable parameter on the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_trace(loss, store).map(|_| ())
    }

    /// Like [`Self::backward`], returning the node indices visited in order.
    pub fn backward_trace(&self, loss: Var, store: &mut ParamStore) -> Result<Vec<usize>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(visited)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.trainable {
                    for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(a, grads) {
                    gemm_nt(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(b, grads) {
                    gemm_tn(self.value(a).data(), g, gb, k, m, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if let Some(ga) = self.slot(a, grads) {
                    gemm_nn(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(b, grads) {
                    gemm_tn(g, self.value(a).data(), gb, n, m, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(v, grads) {
                        axpy(gv, 1.0, g);
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(x, grads) {
                    axpy(gx, 1.0, g);
                }
                if let Some(gb) = self.slot(bias, grads) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.slot(x, grads) {
                    axpy(gx, c, g);
                }
            }
            &Op::MulScalar(x, s) => {
                let c = self.value(s).item();
                if let Some(gx) = self.slot(x, grads) {
                    axpy(gx, c, g);
                }
                if let Some(gs) = self.slot(s, grads) {
                    gs[0] += dot(g, self.value(x).data());
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.slot(a, grads) {
                    for ((o, gi), bv) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += gi * bv;
                    }
                }
                if let Some(gb) = self.slot(b, grads) {
                    for ((o, gi), av) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *o += gi * av;
                    }
                }
            }
            &Op::Relu(x) => {
                if let Some(gx) = self.slot(x, grads) {
                    for ((o, gi), xv) in gx.iter_mut().zip(g).zip(self.value(x).data()) {
                        if *xv > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                if let Some(gg) = self.slot(*gamma, grads) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    for grow in g.chunks(d) {
                        axpy(gb, 1.0, grow);
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dot(&dh, hrow) / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if let Some(gx) = self.slot(x, grads) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    for ((o, gr), yr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            o[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let cols = self.value(x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.slot(x, grads) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(&mut gx[r * cols + start..r * cols + start + len], 1.0, grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(p, grads) {
                        for (r, out) in gp.chunks_mut(w).enumerate() {
                            axpy(out, 1.0, &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(p, grads) {
                        axpy(gp, 1.0, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::MeanRows(x) => {
                let rows = self.value(x).rows();
                if let Some(gx) = self.slot(x, grads) {
                    let c = g.len();
                    let inv = 1.0 / rows as f64;
                    for out in gx.chunks_mut(c) {
                        axpy(out, inv, g);
                    }
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data().to_vec();
                for (i, &h) in inputs.iter().enumerate() {
                    if let Some(gh) = self.slot(h, grads) {
                        axpy(gh, w[i], g);
                    }
                }
                if self.nodes[weights.0].needs_grad {
                    let dw: Vec<f64> = inputs.iter().map(|&h| dot(g, self.value(h).data())).collect();
                    if let Some(gw) = self.slot(*weights, grads) {
                        axpy(gw, 1.0, &dw);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(x, grads) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(*logits, grads) {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Tape-free evaluation of [`Tape::softmax_cross_entropy`].
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.input(logits.clone());
    let loss = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.value(loss).item())
}

/// Tape-free row-wise layer normalization.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, g, b) = (tape.input(x.clone()), tape.input(gamma.clone()), tape.input(beta.clone()));
    let y = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.value(y).clone())
}
