//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in construction order, which is already a
//! topological order, so the backward pass is a single reverse sweep.
//! Gradient accumulation follows that fixed order, making gradients
//! bit-identical across runs for identical inputs.
//!
//! The op set is what a small transformer encoder needs: matmul, add
//! (with bias broadcast over the leading axis), elementwise mul,
//! row-wise softmax, GELU, layer norm, cross-entropy, reshape,
//! transpose, and column-wise concat. No other broadcasting exists;
//! shape coercion is the caller's job.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf: backward does not propagate into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].needs_grad)
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    /// Elementwise add. The single permitted broadcast is `[r, c] + [c]`
    /// (bias over the leading axis, second operand).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let v = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.shape().len() == 2 && vb.shape().len() == 1 && va.cols() == vb.numel() {
            let c = va.cols();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + vb.data()[i % c])
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    /// Elementwise (Hadamard) product, identical shapes only.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    /// Row-wise softmax of a 2-D tensor, max-shifted for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::shape(
                "softmax_rows",
                format!("need 2-D operand, got {:?}", vx.shape()),
            ));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::SoftmaxRows(x), v, ng))
    }

    /// GELU activation (tanh form), elementwise.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Gelu(x), v, ng))
    }

    /// Row-wise layer normalization of a 2-D tensor with learned
    /// per-column gain/offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vx.shape().len() != 2 || vg.numel() != vx.cols() || vb.numel() != vx.cols() {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * vg.data()[j] + vb.data()[j];
            }
        }
        let v = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v, ng))
    }

    /// Mean cross-entropy of row logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be 2-D, got {:?}", vl.shape()),
            ));
        }
        let (b, c) = (vl.rows(), vl.cols());
        if targets.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} logit rows", targets.len(), b),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {t} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for i in 0..b {
            let row = &vl.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total -= row[targets[i]] - lse;
        }
        let v = Tensor::scalar(total / b as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            v,
            ng,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", vx.shape(), shape),
            ));
        }
        let v = Tensor::new(shape, vx.data().to_vec())?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), v, ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transposed()?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Transpose(x), v, ng))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let r = self.value(parts[0]).rows();
        for &p in parts {
            let vp = self.value(p);
            if vp.shape().len() != 2 || vp.rows() != r {
                return Err(Error::shape(
                    "concat",
                    format!("operand {:?} does not have {r} rows", vp.shape()),
                ));
            }
        }
        let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total_c];
        let mut col = 0;
        for &p in parts {
            let vp = self.value(p);
            let c = vp.cols();
            for i in 0..r {
                data[i * total_c + col..i * total_c + col + c]
                    .copy_from_slice(&vp.data()[i * c..(i + 1) * c]);
            }
            col += c;
        }
        let v = Tensor::new(vec![r, total_c], data)?;
        let ng = self.needs(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), v, ng))
    }

    // ---- conveniences built from the ops above --------------------------

    /// Multiply by a scalar constant (materialized as a same-shape leaf).
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let k = self.constant(Tensor::full(shape, c));
        self.mul(x, k)
    }

    /// Sum of all elements as a [1, 1] tensor, via matmul with ones.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![1, n])?;
        let ones = self.constant(Tensor::full(vec![n, 1], 1.0));
        self.matmul(flat, ones)
    }

    /// Column means of a 2-D tensor as [1, c], via a constant row matmul.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let r = self.value(x).rows();
        let w = self.constant(Tensor::full(vec![1, r], 1.0 / r as f64));
        self.matmul(w, x)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients land on every node
    /// reachable from a `param` leaf; leaves not on any path keep a zero
    /// gradient (readable via [`Graph::grad_tensor`]).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite {
                context: "loss".into(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn ensure(&mut self, id: NodeId) -> &mut Vec<f64> {
        let n = self.nodes[id.0].value.numel();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.cols();
                if self.wants(a) {
                    // dA = dC @ B^T
                    let mut da = vec![0.0; m * k];
                    {
                        let bd = self.nodes[b.0].value.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let darow = &mut da[r * k..(r + 1) * k];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                darow[p] += s;
                            }
                        }
                    }
                    accum(self.ensure(a), &da);
                }
                if self.wants(b) {
                    // dB = A^T @ dC
                    let mut db = vec![0.0; k * n];
                    {
                        let ad = self.nodes[a.0].value.data();
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dbrow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    accum(self.ensure(b), &db);
                }
            }

            Op::Add(a, b) => {
                if self.wants(a) {
                    accum(self.ensure(a), g);
                }
                if self.wants(b) {
                    let bn = self.nodes[b.0].value.numel();
                    if bn == g.len() {
                        accum(self.ensure(b), g);
                    } else {
                        // bias broadcast: sum over leading axis
                        let gb = self.ensure(b);
                        for (idx, &gv) in g.iter().enumerate() {
                            gb[idx % bn] += gv;
                        }
                    }
                }
            }

            Op::Mul(a, b) => {
                if self.wants(a) {
                    let prod: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    accum(self.ensure(a), &prod);
                }
                if self.wants(b) {
                    let prod: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accum(self.ensure(b), &prod);
                }
            }

            Op::SoftmaxRows(x) => {
                if self.wants(x) {
                    let out = &self.nodes[i].value;
                    let (r, c) = (out.rows(), out.cols());
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let s = &out.data()[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let dot: f64 = s.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..c {
                            dx[row * c + j] = s[j] * (grow[j] - dot);
                        }
                    }
                    accum(self.ensure(x), &dx);
                }
            }

            Op::Gelu(x) => {
                if self.wants(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(gv, &xv)| gv * gelu_bwd(xv))
                        .collect();
                    accum(self.ensure(x), &dx);
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = {
                    let v = &self.nodes[x.0].value;
                    (v.rows(), v.cols())
                };
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                {
                    let xd = self.nodes[x.0].value.data();
                    let gd = self.nodes[gamma.0].value.data();
                    for row in 0..r {
                        let xs = &xd[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let mean = xs.iter().sum::<f64>() / c as f64;
                        let var =
                            xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = gs.iter().zip(gd).map(|(gv, gm)| gv * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                            dx[row * c + j] = inv_std / cf
                                * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                if self.wants(x) {
                    accum(self.ensure(x), &dx);
                }
                if self.wants(gamma) {
                    accum(self.ensure(gamma), &dgamma);
                }
                if self.wants(beta) {
                    accum(self.ensure(beta), &dbeta);
                }
            }

            Op::CrossEntropy { logits, targets } => {
                if self.wants(logits) {
                    let vl = &self.nodes[logits.0].value;
                    let (b, c) = (vl.rows(), vl.cols());
                    let g0 = g[0];
                    let mut dl = vec![0.0; b * c];
                    for row in 0..b {
                        let xs = &vl.data()[row * c..(row + 1) * c];
                        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = xs.iter().map(|&v| (v - m).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / sum;
                            let t = if j == targets[row] { 1.0 } else { 0.0 };
                            dl[row * c + j] = g0 * (p - t) / b as f64;
                        }
                    }
                    accum(self.ensure(logits), &dl);
                }
            }

            Op::Reshape(x) => {
                if self.wants(x) {
                    accum(self.ensure(x), g);
                }
            }

            Op::Transpose(x) => {
                if self.wants(x) {
                    let out = &self.nodes[i].value;
                    let (r, c) = (out.rows(), out.cols()); // out is [c_in, r_in] of x
                    let mut dx = vec![0.0; r * c];
                    for a in 0..r {
                        for b in 0..c {
                            dx[b * r + a] = g[a * c + b];
                        }
                    }
                    accum(self.ensure(x), &dx);
                }
            }

            Op::Concat(parts) => {
                let total_c = self.nodes[i].value.cols();
                let r = self.nodes[i].value.rows();
                let mut col = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    if self.wants(p) {
                        let mut dp = vec![0.0; r * c];
                        for row in 0..r {
                            dp[row * c..(row + 1) * c]
                                .copy_from_slice(&g[row * total_c + col..row * total_c + col + c]);
                        }
                        accum(self.ensure(p), &dp);
                    }
                    col += c;
                }
            }
        }
    }

    /// Gradient slice for a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient as a tensor; detached leaves yield zeros of the right shape.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

fn accum(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
