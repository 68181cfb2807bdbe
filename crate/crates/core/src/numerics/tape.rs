//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node in creation order, so node
//! indices are already a topological order and backward is a single reverse
//! sweep. A tape lives for one forward/backward pair and is not shared
//! across threads.

use super::error::{NumericsError, Result};
use super::scalar::Scalar;
use super::tensor::{axis_extents, gelu_with_grad, layer_norm_forward, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::AddBias(x, b) => vec![*x, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::SumAll(x)
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::SelectRows { x, .. }
            | Op::ScatterRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// All recorded nodes in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// First node, in recording order, whose value holds NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(Var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).gelu();
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (v, means, rstds) =
            layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis)?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).mean_axis(axis)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum_all());
        self.push(v, Op::SumAll(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).gather(&index, shape)?;
        Ok(self.push(v, Op::Gather { x, index }))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let v = self.value(x).select_rows(&rows)?;
        Ok(self.push(v, Op::SelectRows { x, rows }))
    }

    pub fn scatter_rows(&mut self, x: Var, rows: Vec<usize>, n: usize) -> Result<Var> {
        let v = self.value(x).scatter_rows(&rows, n)?;
        Ok(self.push(v, Op::ScatterRows { x, rows }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mse(self.value(b))?);
        Ok(self.push(v, Op::Mse(a, b)))
    }

    /// Mean cross-entropy of `logits[B×K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = lv.dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(NumericsError::Contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(NumericsError::Index {
                op: "cross_entropy",
                index: bad,
                len: k,
            });
        }
        let probs = lv.softmax(1)?;
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
            total = total + lse - row[y];
        }
        let v = Tensor::scalar(total / T::from_usize(b));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Tracked leaves that the loss does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() && matches!(n.op, Op::Leaf) {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.sum_axis(0)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape(), |k| g.data()[k] * gelu_with_grad(xv.data()[k]).1);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => self.layer_norm_backward(*x, *gamma, *beta, means, rstds, g, grads)?,
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, k, inner) = axis_extents("softmax", y.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * k + t) * inner + j;
                        let dot: T = (0..k).map(|t| g.data()[idx(t)] * y.data()[idx(t)]).sum();
                        for t in 0..k {
                            dx[idx(t)] = y.data()[idx(t)] * (g.data()[idx(t)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, k, inner) = axis_extents("reduce", &xs, *axis)?;
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    T::one() / T::from_usize(k)
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); outer * k * inner];
                for o in 0..outer {
                    for t in 0..k {
                        for j in 0..inner {
                            dx[(o * k + t) * inner + j] = g.data()[o * inner + j] * factor;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::SumAll(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&xs, g.item()));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, k, inner) = axis_extents("slice", &xs, *axis)?;
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); outer * k * inner];
                for o in 0..outer {
                    let dst = (o * k + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let d = dx.data_mut();
                for (k, &src) in index.iter().enumerate() {
                    d[src] = d[src] + g.data()[k];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectRows { x, rows } => {
                let n = self.value(*x).shape()[0];
                self.accumulate(grads, *x, g.scatter_rows(rows, n)?);
            }
            Op::ScatterRows { x, rows } => {
                self.accumulate(grads, *x, g.select_rows(rows)?);
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let c = T::from_f64(2.0) * g.item() / T::from_usize(av.numel());
                let da = av.sub(bv)?.scale(c);
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.scale(-T::one()));
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = probs.dims2("cross_entropy")?;
                let c = g.item() / T::from_usize(b);
                let mut d = probs.clone();
                let dd = d.data_mut();
                for (r, &y) in labels.iter().enumerate() {
                    dd[r * k + y] = dd[r * k + y] - T::one();
                }
                self.accumulate(grads, *logits, d.scale(c));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        means: &[T],
        rstds: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let (r, c) = xv.dims2("layer_norm")?;
        let cf = T::from_usize(c);
        let mut dx = vec![T::zero(); r * c];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); c];
        let mut dxhat = vec![T::zero(); c];
        for i in 0..r {
            let row = xv.row(i);
            let grow = g.row(i);
            for j in 0..c {
                xhat[j] = (row[j] - means[i]) * rstds[i];
                dxhat[j] = grow[j] * gv.data()[j];
                dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                dbeta[j] = dbeta[j] + grow[j];
            }
            let mean_d: T = dxhat.iter().copied().sum::<T>() / cf;
            let mean_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / cf;
            for j in 0..c {
                dx[i * c + j] = rstds[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        if self.needs(x) {
            self.accumulate(grads, x, Tensor::new(vec![r, c], dx)?);
        }
        if self.needs(gamma) {
            self.accumulate(grads, gamma, Tensor::vector(dgamma));
        }
        if self.needs(beta) {
            self.accumulate(grads, beta, Tensor::vector(dbeta));
        }
        Ok(())
    }
}
