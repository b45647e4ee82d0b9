//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and
//! returns the gradient of a scalar loss with respect to every node.
//!
//! The op set is exactly what the MLP and the tiny transformer encoder
//! need: matmul, bias add, residual add, elementwise product, sum, ReLU,
//! GELU, layer norm, embedding gather, multi-head self-attention, row
//! selection, and fused softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every parameter leaf that the loss
    /// reached. A parameter registered twice has its gradients summed.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for &(idx, node) in &self.params {
            let Some(g) = self.get(node) else { continue };
            match out.iter_mut().find(|(i, _)| *i == idx) {
                Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => out.push((idx, g.to_vec())),
            }
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, NodeId)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        [] => (1, 1),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

fn mismatch(name: &str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        name: name.to_string(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

/// `out[n,m] += a[n,k] * b[k,m]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// A constant leaf; it receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A parameter leaf. `keep` (when given) multiplies the stored weights so
    /// that dropped coordinates contribute exactly zero downstream; the
    /// gradient is still reported for every coordinate.
    pub fn param(&mut self, index: usize, tensor: &Tensor, keep: Option<&[bool]>) -> NodeId {
        let mut value =
            Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("tensor invariant");
        if let Some(keep) = keep {
            for (w, &k) in value.data_mut().iter_mut().zip(keep) {
                if !k {
                    *w = 0.0;
                }
            }
        }
        let id = self.push(value, Op::Param);
        self.params.push((index, id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = rows_cols(self.shape(a));
        let bs = self.shape(b).to_vec();
        if bs.len() != 2 || bs[0] != k {
            return Err(mismatch(
                "matmul rhs",
                &[k, bs.last().copied().unwrap_or(0)],
                &bs,
            ));
        }
        let m = bs[1];
        let mut out = vec![0.0; n * m];
        matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (_, m) = rows_cols(&shape);
        if self.shape(bias) != [m] {
            return Err(mismatch("bias", &[m], self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % m])
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add rhs", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul rhs", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(x))
    }

    /// Normalizes each row over the last dimension.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        for (name, p) in [("layer norm gamma", gamma), ("layer norm beta", beta)] {
            if self.shape(p) != [d] {
                return Err(mismatch(name, &[d], self.shape(p)));
            }
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (shape `[vocab, d]`) for each id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        let (vocab, d) = rows_cols(&shape);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for embedding table of {vocab} rows"
                )));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Unmasked multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, width]`; head `h` owns columns
    /// `h * width / heads .. (h + 1) * width / heads`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let shape = self.shape(q).to_vec();
        let (rows, width) = rows_cols(&shape);
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(mismatch("attention query", &[batch * seq, width], &shape));
        }
        for (name, id) in [("attention key", k), ("attention value", v)] {
            if self.shape(id) != shape.as_slice() {
                return Err(mismatch(name, &shape, self.shape(id)));
            }
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * width + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * width + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let o = &mut out[(b * seq + i) * width + off..][..dh];
                    for j in 0..seq {
                        p[j] = scores[j] / z;
                        let vj = &vd[(b * seq + j) * width + off..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (n, d) = rows_cols(&shape);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!("row {r} out of range {n}")));
            }
            out.extend_from_slice(&xs[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = rows_cols(self.shape(logits));
        if labels.len() != n {
            return Err(mismatch("labels", &[n], &[labels.len()]));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * c..(r + 1) * c];
            let p = &mut probs[r * c..(r + 1) * c];
            softmax_into(row, p);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::NoForward(format!(
                "node {} not on a tape of {} nodes",
                loss.0,
                self.nodes.len()
            )));
        };
        if node.value.numel() != 1 {
            return Err(Error::NoForward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (n, k) = rows_cols(self.shape(*a));
                    let m = self.shape(*b)[1];
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    // dA = dY * B^T
                    let ga = acc(&mut grads, *a, n * k);
                    for i in 0..n {
                        let dyr = &dy[i * m..(i + 1) * m];
                        for p in 0..k {
                            let br = &bd[p * m..(p + 1) * m];
                            ga[i * k + p] += dyr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    // dB = A^T * dY
                    let gb = acc(&mut grads, *b, k * m);
                    for i in 0..n {
                        let dyr = &dy[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (g, d) in gb[p * m..(p + 1) * m].iter_mut().zip(dyr) {
                                *g += aip * d;
                            }
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    let m = self.shape(*bias)[0];
                    let gx = acc(&mut grads, *x, dy.len());
                    gx.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    let gb = acc(&mut grads, *bias, m);
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % m] += d;
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        let g = acc(&mut grads, id, dy.len());
                        g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let ga = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * bd[i];
                    }
                    let gb = acc(&mut grads, *b, dy.len());
                    for i in 0..dy.len() {
                        gb[i] += dy[i] * ad[i];
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).numel();
                    let g = acc(&mut grads, *x, len);
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
                Op::Relu(x) => {
                    let xd = self.data(*x);
                    let g = acc(&mut grads, *x, dy.len());
                    for i in 0..dy.len() {
                        if xd[i] > 0.0 {
                            g[i] += dy[i];
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xd = self.data(*x);
                    let g = acc(&mut grads, *x, dy.len());
                    for i in 0..dy.len() {
                        let v = xd[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = self.shape(*gamma)[0];
                    let rows = rstd.len();
                    let gd = self.data(*gamma).to_vec();
                    {
                        let gg = acc(&mut grads, *gamma, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] += dy[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    {
                        let gbeta = acc(&mut grads, *beta, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gbeta[c] += dy[r * d + c];
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = dy[r * d + c] * gd[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let shape = self.shape(*table);
                    let (vocab, d) = (shape[0], shape[1]);
                    let g = acc(&mut grads, *table, vocab * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += dy[r * d + c];
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let width = self.shape(*q)[1];
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                    let n = batch * seq * width;
                    let mut gq = vec![0.0; n];
                    let mut gk = vec![0.0; n];
                    let mut gv = vec![0.0; n];
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = h * dh;
                            for i in 0..seq {
                                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                                let dyi = &dy[(b * seq + i) * width + off..][..dh];
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    let row = (b * seq + j) * width + off;
                                    let vj = &vd[row..row + dh];
                                    dp[j] = dyi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                    dot += p[j] * dp[j];
                                    for c in 0..dh {
                                        gv[row + c] += p[j] * dyi[c];
                                    }
                                }
                                let qrow = (b * seq + i) * width + off;
                                for j in 0..seq {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = (b * seq + j) * width + off;
                                    for c in 0..dh {
                                        gq[qrow + c] += ds * kd[krow + c];
                                        gk[krow + c] += ds * qd[qrow + c];
                                    }
                                }
                            }
                        }
                    }
                    for (id, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                        let t = acc(&mut grads, id, n);
                        t.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let shape = self.shape(*x);
                    let (n, d) = rows_cols(shape);
                    let g = acc(&mut grads, *x, n * d);
                    for (o, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            g[r * d + c] += dy[o * d + c];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let c = probs.len() / n.max(1);
                    let g = acc(&mut grads, *logits, n * c);
                    let s = dy[0] / n as f64;
                    for r in 0..n {
                        for j in 0..c {
                            let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
