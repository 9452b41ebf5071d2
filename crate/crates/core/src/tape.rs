//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Values are computed eagerly as the graph is built. `backward` walks the
//! tape once in reverse and accumulates into per-parameter buffers in fixed
//! index order, so repeated runs on the same inputs are bitwise identical.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Stabilizer added to the per-row variance inside layer norm.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Handle to a node on one specific tape. Ids from different tapes must not
/// be mixed; builders only ever hand out ids for the tape they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Param {
        store_idx: usize,
    },
    Input,
    Matmul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    BatchMatmul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SwapAxes12 {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        w: Tensor,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape over a borrowed parameter store.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    loss: Option<NodeId>,
}

fn mat_dims(shape: &[usize], trans: bool) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "matmul operand must be rank 2, got {shape:?}"
        )));
    }
    Ok(if trans {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    })
}

/// dst[a][c][b][d] += src[a][b][c][d]
fn swap12_acc(src: &[f64], d0: usize, d1: usize, d2: usize, d3: usize, dst: &mut [f64]) {
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let t = ((a * d2 + c) * d1 + b) * d3;
                for j in 0..d3 {
                    dst[t + j] += src[s + j];
                }
            }
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            loss: None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that reads (and copies) a parameter from the store.
    pub fn param(&mut self, layer: &str, name: &str) -> Result<NodeId> {
        let idx = self
            .store
            .index_of(layer, name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {layer}.{name}")))?;
        let value = self.store.value(idx).clone();
        Ok(self.push(Op::Param { store_idx: idx }, value))
    }

    /// Constant leaf. No gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (m, ka) = mat_dims(self.shape(a), trans_a)?;
        let (kb, n) = mat_dims(self.shape(b), trans_b)?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {ka} vs {kb}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, self.data(a), trans_a, self.data(b), trans_b, 0.0, &mut out);
        Ok(self.push(
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            },
            Tensor::new(vec![m, n], out)?,
        ))
    }

    /// `[g, m, k] @ [g, k, n]` (or `[g, n, k]` when `trans_b`), one product
    /// per leading group.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::Shape(format!(
                "batch_matmul operands must be rank 3, got {sa:?} and {sb:?}"
            )));
        }
        if sa[0] != sb[0] {
            return Err(Error::Shape(format!(
                "batch_matmul group dims disagree: {} vs {}",
                sa[0], sb[0]
            )));
        }
        let (m, ka) = (sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::Shape(format!(
                "batch_matmul inner dims disagree: {ka} vs {kb}"
            )));
        }
        let groups = sa[0];
        let (pa, pb) = (m * ka, sb[1] * sb[2]);
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm(
                m,
                ka,
                n,
                &self.data(a)[g * pa..(g + 1) * pa],
                false,
                &self.data(b)[g * pb..(g + 1) * pb],
                trans_b,
                0.0,
                &mut out[g * m * n..(g + 1) * m * n],
            );
        }
        Ok(self.push(
            Op::BatchMatmul { a, b, trans_b },
            Tensor::new(vec![groups, m, n], out)?,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out)?))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.data(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, Tensor::new(shape, out).unwrap())
    }

    /// Tanh-approximated gelu, smooth everywhere.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, Tensor::new(shape, out).unwrap())
    }

    /// Normalizes the last axis of `x`, then applies elementwise weight and
    /// bias. `w` and `b` must be rank 1 with the length of that axis.
    pub fn layer_norm(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm input must have rank >= 1".into()))?;
        if self.shape(w) != [c] || self.shape(b) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm weight and bias must have shape [{c}]"
            )));
        }
        let rows = self.data(x).len() / c;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        {
            let xv = self.data(x);
            let wv = self.data(w).to_vec();
            let bv = self.data(b).to_vec();
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let mu = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                for j in 0..c {
                    out[r * c + j] = (row[j] - mu) * rs * wv[j] + bv[j];
                }
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                w,
                b,
                mean,
                rstd,
            },
            Tensor::new(shape, out)?,
        ))
    }

    /// Gathers rows of a `[v, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {s:?}"
            )));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = vec![0.0; ids.len() * d];
        for (n, &id) in ids.iter().enumerate() {
            out[n * d..(n + 1) * d].copy_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![n, d], out)?,
        ))
    }

    /// Softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax input must have rank >= 1".into()))?;
        let rows = self.data(x).len() / c;
        let mut out = vec![0.0; rows * c];
        {
            let xv = self.data(x);
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[r * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    out[r * c + j] /= sum;
                }
            }
        }
        Ok(self.push(Op::SoftmaxRows { x }, Tensor::new(shape, out)?))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`, swapping the two middle axes.
    pub fn swap_axes_12(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "swap_axes_12 input must be rank 4, got {s:?}"
            )));
        }
        let mut out = vec![0.0; self.data(x).len()];
        swap12_acc(self.data(x), s[0], s[1], s[2], s[3], &mut out);
        Ok(self.push(
            Op::SwapAxes12 { x },
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
        ))
    }

    /// Scalar `sum(x * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor) -> Result<NodeId> {
        if self.shape(x) != w.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum shapes disagree: {:?} vs {:?}",
                self.shape(x),
                w.shape()
            )));
        }
        let v = self.nodes[x.0].value.dot(&w);
        Ok(self.push(Op::WeightedSum { x, w }, Tensor::scalar(v)))
    }

    /// Weighted softmax cross entropy over `[rows, v]` logits:
    /// `sum_r weights[r] * (logsumexp(row r) - logit[r, targets[r]])`.
    /// Rows with weight 0 contribute nothing, in value or gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy logits must be rank 2, got {s:?}"
            )));
        }
        let (rows, v) = (s[0], s[1]);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy needs {rows} targets and weights, got {} and {}",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Invalid(format!(
                "cross_entropy weights must be finite and non-negative, got {bad}"
            )));
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        {
            let z = self.data(logits);
            for r in 0..rows {
                let row = &z[r * v..(r + 1) * v];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..v {
                    let e = (row[j] - m).exp();
                    probs[r * v + j] = e;
                    sum += e;
                }
                for j in 0..v {
                    probs[r * v + j] /= sum;
                }
                loss += weights[r] * (m + sum.ln() - row[targets[r]]);
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Marks the scalar node the backward pass will differentiate.
    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        if self.loss.is_some() {
            return Err(Error::Usage("loss already set on this tape".into()));
        }
        let v = &self.nodes[id.0].value;
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", v.item())));
        }
        self.loss = Some(id);
        Ok(())
    }

    pub fn loss_value(&self) -> Result<f64> {
        self.loss
            .map(|id| self.nodes[id.0].value.item())
            .ok_or_else(|| Error::Usage("no loss set on this tape".into()))
    }

    /// Gradients of the loss with respect to every store parameter.
    /// Requires `set_loss` first; errors if any gradient is non-finite.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self.loss.ok_or_else(|| {
            Error::Usage("backward requires a loss; run the forward pass and set_loss first".into())
        })?;
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;
        let mut out = self.store.zero_grads();

        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let g = &hi[0];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param { store_idx } => {
                    let dst = out.tensor_mut(*store_idx).data_mut();
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
                Op::Input => {}
                Op::Matmul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let sa = self.nodes[a.0].value.shape();
                    let sb = self.nodes[b.0].value.shape();
                    let (ra, ca) = (sa[0], sa[1]);
                    let (rb, cb) = (sb[0], sb[1]);
                    let gv = g.data();
                    match (trans_a, trans_b) {
                        (false, false) => {
                            gemm(ra, cb, ca, gv, false, bv, true, 1.0, lo[a.0].data_mut());
                            gemm(rb, ra, cb, av, true, gv, false, 1.0, lo[b.0].data_mut());
                        }
                        (false, true) => {
                            gemm(ra, rb, ca, gv, false, bv, false, 1.0, lo[a.0].data_mut());
                            gemm(rb, ra, cb, gv, true, av, false, 1.0, lo[b.0].data_mut());
                        }
                        (true, false) => {
                            gemm(ra, cb, ca, bv, false, gv, true, 1.0, lo[a.0].data_mut());
                            gemm(rb, ca, cb, av, false, gv, false, 1.0, lo[b.0].data_mut());
                        }
                        (true, true) => {
                            gemm(ra, rb, ca, bv, true, gv, true, 1.0, lo[a.0].data_mut());
                            gemm(rb, ca, cb, gv, true, av, true, 1.0, lo[b.0].data_mut());
                        }
                    }
                }
                Op::BatchMatmul { a, b, trans_b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (groups, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *trans_b { sb[1] } else { sb[2] };
                    let (pa, pb, pg) = (m * k, sb[1] * sb[2], m * n);
                    let gv = g.data();
                    for gi in 0..groups {
                        let gs = &gv[gi * pg..(gi + 1) * pg];
                        let bs = &bv[gi * pb..(gi + 1) * pb];
                        let da = &mut lo[a.0].data_mut()[gi * pa..(gi + 1) * pa];
                        if *trans_b {
                            gemm(m, n, k, gs, false, bs, false, 1.0, da);
                        } else {
                            gemm(m, n, k, gs, false, bs, true, 1.0, da);
                        }
                    }
                    for gi in 0..groups {
                        let gs = &gv[gi * pg..(gi + 1) * pg];
                        let as_ = &av[gi * pa..(gi + 1) * pa];
                        let db = &mut lo[b.0].data_mut()[gi * pb..(gi + 1) * pb];
                        if *trans_b {
                            gemm(n, m, k, gs, true, as_, false, 1.0, db);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, 1.0, db);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (d, s) in lo[a.0].data_mut().iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                    for (d, s) in lo[b.0].data_mut().iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
                Op::Scale { x, c } => {
                    for (d, s) in lo[x.0].data_mut().iter_mut().zip(g.iter()) {
                        *d += c * s;
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.nodes[x.0].value.data();
                    let dst = lo[x.0].data_mut();
                    for (j, s) in g.iter().enumerate() {
                        let v = xv[j];
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        dst[j] += s * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
                Op::LayerNorm {
                    x,
                    w,
                    b,
                    mean,
                    rstd,
                } => {
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let c = wv.len();
                    let rows = xv.len() / c;
                    let gv = g.data();
                    let mut dw = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    {
                        let dx = lo[x.0].data_mut();
                        for r in 0..rows {
                            let (mu, rs) = (mean[r], rstd[r]);
                            let xr = &xv[r * c..(r + 1) * c];
                            let gr = &gv[r * c..(r + 1) * c];
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for j in 0..c {
                                let xh = (xr[j] - mu) * rs;
                                let dxh = gr[j] * wv[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dw[j] += gr[j] * xh;
                                db[j] += gr[j];
                            }
                            let inv_c = 1.0 / c as f64;
                            for j in 0..c {
                                let xh = (xr[j] - mu) * rs;
                                let dxh = gr[j] * wv[j];
                                dx[r * c + j] +=
                                    rs * (dxh - sum_dxh * inv_c - xh * sum_dxh_xh * inv_c);
                            }
                        }
                    }
                    for (d, s) in lo[w.0].data_mut().iter_mut().zip(dw.iter()) {
                        *d += s;
                    }
                    for (d, s) in lo[b.0].data_mut().iter_mut().zip(db.iter()) {
                        *d += s;
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[i].value.shape()[1];
                    let dst = lo[table.0].data_mut();
                    let gv = g.data();
                    for (n, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] += gv[n * d + j];
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let yv = self.nodes[i].value.data();
                    let c = *self.nodes[i].value.shape().last().unwrap();
                    let rows = yv.len() / c;
                    let gv = g.data();
                    let dst = lo[x.0].data_mut();
                    for r in 0..rows {
                        let yr = &yv[r * c..(r + 1) * c];
                        let gr = &gv[r * c..(r + 1) * c];
                        let s: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dst[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::Reshape { x } => {
                    for (d, s) in lo[x.0].data_mut().iter_mut().zip(g.iter()) {
                        *d += s;
                    }
                }
                Op::SwapAxes12 { x } => {
                    let s = self.nodes[i].value.shape().to_vec();
                    swap12_acc(g.data(), s[0], s[1], s[2], s[3], lo[x.0].data_mut());
                }
                Op::WeightedSum { x, w } => {
                    let gs = g.item();
                    for (d, s) in lo[x.0].data_mut().iter_mut().zip(w.iter()) {
                        *d += gs * s;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let v = self.nodes[logits.0].value.shape()[1];
                    let gs = g.item();
                    let dst = lo[logits.0].data_mut();
                    for (r, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            dst[r * v + j] += gs * w * (probs[r * v + j] - delta);
                        }
                    }
                }
            }
        }

        if !out.all_finite() {
            return Err(Error::NonFinite("gradient contains non-finite values".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, max_rel_err};
    use crate::params::LayerSet;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-5;

    fn ramp(shape: Vec<usize>, lo: f64, step: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| lo + step * i as f64).collect()).unwrap()
    }

    #[test]
    fn gelu_matches_reference_points() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = t.gelu(x);
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.8411920).abs() < 1e-6);
        assert!((v[2] + 0.1588080).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = t.input(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let b = t.input(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = t.layer_norm(x, w, b).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.22474).abs() < 1e-3);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] - 1.22474).abs() < 1e-3);
        assert!((v[0] + v[1] + v[2]).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_matches_hand_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::new(vec![2, 2], vec![0.0, 2.0f64.ln(), -1e30, -1e30]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
        // Fully masked rows degrade to a uniform distribution.
        assert!((v[2] - 0.5).abs() < 1e-12);
        assert!((v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_gathers_rows() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let table = t.input(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = t.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(e).shape(), &[3, 2]);
        assert_eq!(t.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn swap_axes_12_permutes_middle_axes() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(ramp(vec![1, 2, 3, 1], 0.0, 1.0));
        let y = t.swap_axes_12(x).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 3, 2, 1]);
        assert_eq!(t.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let z = t.input(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap());
        let l = t.cross_entropy(z, &[2, 2], &[1.0, 0.5]).unwrap();
        assert!((t.value(l).item() - 1.5 * 0.40760596).abs() < 1e-7);

        let mut t2 = Tape::new(&store);
        let z2 = t2.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l2 = t2.cross_entropy(z2, &[0], &[1.0]).unwrap();
        assert!((t2.value(l2).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    fn matmul_graph<'a>(s: &'a ParamStore, ta: bool, tb: bool) -> Tape<'a> {
        let mut t = Tape::new(s);
        let a = t.param("la", "w").unwrap();
        let b = t.param("lb", "w").unwrap();
        let c = t.matmul(a, b, ta, tb).unwrap();
        let w = ramp(vec![2, 2], 0.3, 0.7);
        let l = t.weighted_sum(c, w).unwrap();
        t.set_loss(l).unwrap();
        t
    }

    #[test]
    fn fd_matmul_all_transpose_combinations() {
        for ta in [false, true] {
            for tb in [false, true] {
                let mut store = ParamStore::new();
                let sa = if ta { vec![3, 2] } else { vec![2, 3] };
                let sb = if tb { vec![2, 3] } else { vec![3, 2] };
                store.insert("la", "w", ramp(sa, -0.8, 0.31));
                store.insert("lb", "w", ramp(sb, 0.5, -0.27));
                let analytic = matmul_graph(&store, ta, tb).backward().unwrap();
                let fd = fd_grad(&mut store, |s| matmul_graph(s, ta, tb).loss_value().unwrap(), FD_H);
                assert!(
                    max_rel_err(&analytic, &fd) < FD_TOL,
                    "trans_a={ta} trans_b={tb}: rel err {}",
                    max_rel_err(&analytic, &fd)
                );
            }
        }
    }

    fn attention_graph<'a>(s: &'a ParamStore) -> Tape<'a> {
        let mut t = Tape::new(s);
        let q = t.param("lq", "w").unwrap();
        let k = t.param("lk", "w").unwrap();
        let scores = t.batch_matmul(q, k, true).unwrap();
        let scaled = t.scale(scores, 1.0 / 3.0f64.sqrt());
        let sm = t.softmax_rows(scaled).unwrap();
        // k doubles as v, exercising a node consumed by two ops.
        let ctx = t.batch_matmul(sm, k, false).unwrap();
        let mixed = t.add(ctx, q).unwrap();
        let re = t.reshape(mixed, vec![2, 2, 3, 1]).unwrap();
        let sw = t.swap_axes_12(re).unwrap();
        let w = ramp(vec![2, 3, 2, 1], -0.4, 0.23);
        let l = t.weighted_sum(sw, w).unwrap();
        t.set_loss(l).unwrap();
        t
    }

    #[test]
    fn fd_attention_style_block() {
        let mut store = ParamStore::new();
        store.insert("lq", "w", ramp(vec![2, 2, 3], -0.6, 0.17));
        store.insert("lk", "w", ramp(vec![2, 2, 3], 0.9, -0.21));
        let analytic = attention_graph(&store).backward().unwrap();
        let fd = fd_grad(&mut store, |s| attention_graph(s).loss_value().unwrap(), FD_H);
        assert!(
            max_rel_err(&analytic, &fd) < FD_TOL,
            "rel err {}",
            max_rel_err(&analytic, &fd)
        );
    }

    fn ln_gelu_graph<'a>(s: &'a ParamStore) -> Tape<'a> {
        let mut t = Tape::new(s);
        let x = t.param("lx", "w").unwrap();
        let w = t.param("ln", "w").unwrap();
        let b = t.param("ln", "b").unwrap();
        let y = t.layer_norm(x, w, b).unwrap();
        let a = t.gelu(y);
        let wt = ramp(vec![2, 3], 0.2, 0.4);
        let l = t.weighted_sum(a, wt).unwrap();
        t.set_loss(l).unwrap();
        t
    }

    #[test]
    fn fd_layer_norm_gelu_chain() {
        let mut store = ParamStore::new();
        store.insert("lx", "w", ramp(vec![2, 3], -1.1, 0.43));
        store.insert("ln", "w", ramp(vec![3], 0.8, 0.2));
        store.insert("ln", "b", ramp(vec![3], -0.1, 0.15));
        let analytic = ln_gelu_graph(&store).backward().unwrap();
        let fd = fd_grad(&mut store, |s| ln_gelu_graph(s).loss_value().unwrap(), FD_H);
        assert!(
            max_rel_err(&analytic, &fd) < FD_TOL,
            "rel err {}",
            max_rel_err(&analytic, &fd)
        );
    }

    fn emb_ce_graph<'a>(s: &'a ParamStore) -> Tape<'a> {
        let mut t = Tape::new(s);
        let table = t.param("emb", "tok").unwrap();
        let head = t.param("head", "w").unwrap();
        let e = t.embedding(table, &[0, 2, 4, 2]).unwrap();
        let z = t.matmul(e, head, false, false).unwrap();
        let l = t.cross_entropy(z, &[1, 0, 3, 2], &[0.5, 0.25, 0.25, 0.0]).unwrap();
        t.set_loss(l).unwrap();
        t
    }

    #[test]
    fn fd_embedding_cross_entropy_chain() {
        let mut store = ParamStore::new();
        store.insert("emb", "tok", ramp(vec![5, 3], -0.7, 0.19));
        store.insert("head", "w", ramp(vec![3, 5], 0.6, -0.13));
        let analytic = emb_ce_graph(&store).backward().unwrap();
        let fd = fd_grad(&mut store, |s| emb_ce_graph(s).loss_value().unwrap(), FD_H);
        assert!(
            max_rel_err(&analytic, &fd) < FD_TOL,
            "rel err {}",
            max_rel_err(&analytic, &fd)
        );
        // Rows 1 and 3 of the table are never gathered, so their gradients
        // are exactly zero.
        for row in [1, 3] {
            let zeros = &analytic.tensor(0).data()[row * 3..(row + 1) * 3];
            assert_eq!(zeros, &[0.0, 0.0, 0.0]);
        }
        // The layer-restricted dot over just the head equals the flat dot of
        // the head block with itself.
        let head_only = LayerSet::from_ids(["head"]).unwrap();
        let si = store.grad_dot(&analytic, &analytic, &head_only).unwrap();
        let flat = analytic.flatten_layers(&store, &head_only).unwrap();
        let manual: f64 = flat.iter().map(|v| v * v).sum();
        assert!((si - manual).abs() < 1e-15);
    }

    #[test]
    fn backward_before_loss_is_a_usage_error() {
        let mut store = ParamStore::new();
        store.insert("la", "w", ramp(vec![2, 2], 0.0, 1.0));
        let mut t = Tape::new(&store);
        let _ = t.param("la", "w").unwrap();
        assert!(matches!(t.backward(), Err(Error::Usage(_))));
        assert!(matches!(t.loss_value(), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::scalar(1.0));
        let y = t.scale(x, f64::INFINITY);
        assert!(matches!(t.set_loss(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn builder_shape_errors() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let a = t.input(ramp(vec![2, 3], 0.0, 1.0));
        let b = t.input(ramp(vec![2, 3], 0.0, 1.0));
        assert!(t.matmul(a, b, false, false).is_err());
        assert!(t.weighted_sum(a, Tensor::zeros(vec![3, 2])).is_err());
        assert!(t.embedding(a, &[2]).is_err());
        assert!(t.cross_entropy(a, &[3, 0], &[1.0, 1.0]).is_err());
        assert!(t.cross_entropy(a, &[0, 0], &[1.0, -1.0]).is_err());
        let s = t.input(Tensor::scalar(0.5));
        assert!(t.set_loss(a).is_err());
        t.set_loss(s).unwrap();
        assert!(matches!(t.set_loss(s), Err(Error::Usage(_))));
    }
}
