//! Tape-style reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking them backwards from the loss is a valid
//! topological order for the chain rule. Nodes that do not depend on any
//! `requires_grad` leaf are skipped entirely during backward.

use crate::error::{Error, Result};

use super::ops::{self, NormCache};
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleBy {
        scale: Var,
        x: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; it takes part in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        t.clear_grad();
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = x.cols();
        if b.numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension {
                op: "mul",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies `x` by the single-element tensor `scale`.
    pub fn scale_by(&mut self, scale: Var, x: Var) -> Result<Var> {
        let s = self.value(scale);
        if s.numel() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                left: s.shape().to_vec(),
                right: vec![1],
            });
        }
        let s = s.item();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| s * v).collect(),
        )?;
        let rg = self.rg(scale) || self.rg(x);
        Ok(self.push(out, Op::ScaleBy { scale, x }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| c * v).collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let out = ops::softmax_rows_masked(self.value(x), key_mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding row",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        if ids.is_empty() {
            return Err(Error::contract("gather of zero rows"));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > n || len == 0 {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::contract("concat of zero tensors")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::contract("concat of zero tensors")),
        };
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_logits(self.value(logits), targets, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar loss of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let upstream = Tensor::new(node.value.shape().to_vec(), gout)?;
            let mut contrib: Vec<(Var, Vec<f64>)> = Vec::new();
            self.node_backward(node, &upstream, &mut contrib)?;
            for (v, g) in contrib {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(upstream.into_data());
        }
        Ok(Gradients { grads })
    }

    fn node_backward(
        &self,
        node: &Node,
        dy: &Tensor,
        out: &mut Vec<(Var, Vec<f64>)>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, ops::matmul_bt(dy, self.value(*b))?.into_data()));
                }
                if self.rg(*b) {
                    out.push((*b, ops::matmul_at(self.value(*a), dy)?.into_data()));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    out.push((*a, ops::matmul(dy, self.value(*b))?.into_data()));
                }
                if self.rg(*b) {
                    out.push((*b, ops::matmul_at(dy, self.value(*a))?.into_data()));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.data().to_vec()));
                out.push((*b, dy.data().to_vec()));
            }
            Op::AddRow(a, bias) => {
                out.push((*a, dy.data().to_vec()));
                if self.rg(*bias) {
                    let n = dy.cols();
                    let mut gb = vec![0.0; n];
                    for (i, v) in dy.data().iter().enumerate() {
                        gb[i % n] += v;
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    out.push((
                        *a,
                        dy.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(g, y)| g * y)
                            .collect(),
                    ));
                }
                if self.rg(*b) {
                    out.push((
                        *b,
                        dy.data()
                            .iter()
                            .zip(av.data())
                            .map(|(g, x)| g * x)
                            .collect(),
                    ));
                }
            }
            Op::ScaleBy { scale, x } => {
                let s = self.value(*scale).item();
                let xv = self.value(*x);
                if self.rg(*scale) {
                    let ds = dy.data().iter().zip(xv.data()).map(|(g, v)| g * v).sum();
                    out.push((*scale, vec![ds]));
                }
                if self.rg(*x) {
                    out.push((*x, dy.data().iter().map(|g| s * g).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, dy.data().iter().map(|g| c * g).collect())),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                out.push((
                    *x,
                    dy.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, v)| g * ops::gelu_derivative(*v))
                        .collect(),
                ));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                let rows = dy.rows();
                let xh = &cache.normalized;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..rows {
                        for j in 0..d {
                            let gy = dy.data()[i * d + j];
                            dg[j] += gy * xh[i * d + j];
                            db[j] += gy;
                        }
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * d];
                    let df = d as f64;
                    for i in 0..rows {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dy.data()[i * d + j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[i * d + j];
                        }
                        let is = cache.inv_std[i];
                        for j in 0..d {
                            let dxh = dy.data()[i * d + j] * g[j];
                            dx[i * d + j] =
                                is / df * (df * dxh - sum_dxh - xh[i * d + j] * sum_dxh_xh);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dy.data()[r * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, len) = (xv.cols(), dy.cols());
                let mut dx = vec![0.0; xv.numel()];
                for i in 0..dy.rows() {
                    dx[i * n + start..i * n + start + len].copy_from_slice(dy.row(i));
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(dy.rows() * w);
                    for i in 0..dy.rows() {
                        dp.extend_from_slice(&dy.row(i)[offset..offset + w]);
                    }
                    offset += w;
                    out.push((p, dp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    out.push((p, dy.data()[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let g = dy.item();
                out.push((*x, vec![g; self.value(*x).numel()]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let scale = dy.item() / *count as f64;
                let v = probs.cols();
                let mut dl = vec![0.0; probs.numel()];
                for i in 0..probs.rows() {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs.at(i, j) * scale;
                    }
                    dl[i * v + targets[i]] -= scale;
                }
                out.push((*logits, dl));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::new();
        let xs = vec![0.5, -1.5, 2.0];
        let x = g.param(Tensor::vector(xs.clone()));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xs[..]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.param(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
        let y = g.matmul(a, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_inputs_accumulate() {
        // loss = sum(x + x) → grad 2
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 1.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[2.0, 2.0]);
    }
}
