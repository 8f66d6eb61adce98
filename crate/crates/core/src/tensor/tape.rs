use super::kernels::{conv1d_backward, conv1d_forward, matmul_backward, matmul_forward, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    AddRowBias(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    GradReverse(Var),
    LastStep(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    LogSumExpRows {
        input: Var,
        probs: Vec<f64>,
    },
    Sum(Var),
    StandardizeCols {
        input: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of one forward evaluation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it.
/// Leaves created with [`Graph::constant`] never receive a gradient buffer.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    reversal_sign: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers keyed by node, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Every differentiable leaf
    /// has an entry (zeros when the loss does not depend on it); constants and
    /// intermediate nodes have none.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of allocated gradient buffers.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::dim(format!("{what} expects a 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            reversal_sign: -1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Replaces the gradient-reversal multiplier. Only the verification
    /// suite's mutation check uses this.
    pub(crate) fn set_reversal_sign(&mut self, sign: f64) {
        self.reversal_sign = sign;
    }

    /// Smallest nonzero `|x|` over the inputs of every ReLU on the tape;
    /// infinity if there are none. Finite-difference checks use it to skip
    /// instances that sit near a kink. Exact zeros are skipped: they come from
    /// sums of already-clamped values, which stay zero under perturbation.
    pub(crate) fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.nodes[a.0].value.data()),
                _ => None,
            })
            .flatten()
            .filter(|x| **x != 0.0)
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = check_2d(av, "matmul")?;
        let (k2, n) = check_2d(bv, "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = matmul_forward(av.data(), bv.data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = check_2d(av, "transpose")?;
        let out = transpose_data(av.data(), m, n);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![n, m], out)?, rg))
    }

    /// Causal dilated convolution. `input` is `[C_in, T]` or `[N, C_in, T]`,
    /// `weight` is `[C_out, C_in, K]`, `bias` is `[C_out]`. Output keeps the
    /// input length: the sequence is left-padded with `(K-1)·dilation` zeros.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Parameter(format!("dilation must be >= 1, got {dilation}")));
        }
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let (batch, ci, len) = match *xv.shape() {
            [c, t] => (1, c, t),
            [n, c, t] => (n, c, t),
            _ => {
                return Err(Error::dim(format!(
                    "conv1d input must be [C,T] or [N,C,T], got {:?}",
                    xv.shape()
                )))
            }
        };
        let [co, wci, kernel] = *wv.shape() else {
            return Err(Error::dim(format!(
                "conv1d weight must be [C_out,C_in,K], got {:?}",
                wv.shape()
            )));
        };
        if wci != ci || kernel < 1 {
            return Err(Error::dim(format!(
                "conv1d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        if bv.shape() != [co] {
            return Err(Error::dim(format!(
                "conv1d bias must be [{co}], got {:?}",
                bv.shape()
            )));
        }
        let dims = ConvDims {
            batch,
            in_channels: ci,
            out_channels: co,
            len,
            kernel,
            dilation,
        };
        let out = conv1d_forward(xv.data(), wv.data(), bv.data(), dims);
        let shape = if xv.ndim() == 2 {
            vec![co, len]
        } else {
            vec![batch, co, len]
        };
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, c), out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| -x);
        let rg = self.needs(&[a]);
        self.push(Op::Neg(a), out, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.needs(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let rg = self.needs(&[a]);
        self.push(Op::Exp(a), out, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = self.map(a, f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(Op::Log(a), out, rg))
    }

    /// Adds a length-D bias to every row of an `[N, D]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, d) = check_2d(xv, "add_row_bias")?;
        if bv.shape() != [d] {
            return Err(Error::dim(format!(
                "row bias {:?} does not match {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddRowBias(x, bias), out, rg))
    }

    /// `x · w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// Mean over rows of `−log softmax(logits)[i, labels[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = check_2d(lv, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {} rows", labels.len(), n)));
        }
        if n == 0 {
            return Err(Error::dim("softmax_cross_entropy on an empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} not in [0, {c})")));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, row) in lv.data().chunks(c).enumerate() {
            let lse = log_sum_exp(row, &mut probs[i * c..(i + 1) * c]);
            total += lse - row[labels[i]];
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(total / n as f64),
            rg,
        ))
    }

    /// Scales every row of an `[N, D]` tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, d) = check_2d(av, "l2_normalize")?;
        let mut norms = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.len());
        for (i, row) in av.data().chunks(d).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::DegenerateEmbedding(format!("row {i} has norm {norm:e}")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::L2Normalize { input: a, norms }, out, rg))
    }

    /// Identity forward; negates the gradient on the way back.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        let rg = self.needs(&[a]);
        self.push(Op::GradReverse(a), out, rg)
    }

    /// Selects the final time step: `[N, C, T] -> [N, C]` or `[C, T] -> [C]`.
    pub fn last_step(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (lead, t) = match *av.shape() {
            [c, t] => (vec![c], t),
            [n, c, t] => (vec![n, c], t),
            _ => {
                return Err(Error::dim(format!(
                    "last_step expects [C,T] or [N,C,T], got {:?}",
                    av.shape()
                )))
            }
        };
        if t == 0 {
            return Err(Error::dim("last_step on a zero-length sequence"));
        }
        let data = av.data().chunks(t).map(|s| s[t - 1]).collect();
        let out = Tensor::new(lead, data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::LastStep(a), out, rg))
    }

    /// Per-row dot products of two `[N, D]` tensors, as `[N, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = check_2d(av, "row_dot")?;
        av.same_shape(bv, "row_dot")?;
        let data = av
            .data()
            .chunks(d)
            .zip(bv.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::new(vec![n, 1], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::RowDot(a, b), out, rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols of nothing"));
        };
        let n = check_2d(self.value(first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = check_2d(self.value(p), "concat_cols")?;
            if r != n {
                return Err(Error::dim(format!("concat_cols rows {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// Row-wise `log Σ_j exp(x[i, j])`, as `[N, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, c) = check_2d(av, "logsumexp_rows")?;
        if c == 0 {
            return Err(Error::dim("logsumexp over zero columns"));
        }
        let mut probs = vec![0.0; n * c];
        let data = av
            .data()
            .chunks(c)
            .enumerate()
            .map(|(i, row)| log_sum_exp(row, &mut probs[i * c..(i + 1) * c]))
            .collect();
        let out = Tensor::new(vec![n, 1], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::LogSumExpRows { input: a, probs }, out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Standardizes each column of `[N, D]` with the batch mean and biased
    /// variance.
    pub fn standardize_cols(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (n, d) = check_2d(av, "standardize_cols")?;
        if n == 0 {
            return Err(Error::dim("standardize_cols on an empty batch"));
        }
        let (mean, var) = column_moments(av);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(Op::StandardizeCols { input: a, inv_std }, out, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)
                        .expect("gradient matches its node"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let (ga, gb) = matmul_backward(av.data(), bv.data(), g, m, k, n);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, transpose_data(g, m, n));
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            } => {
                let (gx, gw, gb) = conv1d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    *dims,
                );
                acc(*input, gx);
                acc(*weight, gw);
                acc(*bias, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::Neg(a) => acc(*a, g.iter().map(|x| -x).collect()),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => acc(
                *a,
                g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect(),
            ),
            Op::Log(a) => acc(
                *a,
                g.iter().zip(self.value(*a).data()).map(|(x, y)| x / y).collect(),
            ),
            Op::AddRowBias(x, b) => {
                let d = node.value.shape()[1];
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] -= s;
                }
                acc(*logits, gl);
            }
            Op::L2Normalize { input, norms } => {
                let d = node.value.shape()[1];
                let mut gx = Vec::with_capacity(g.len());
                for ((grow, yrow), norm) in g.chunks(d).zip(node.value.data().chunks(d)).zip(norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(gv, y)| (gv - y * dot) / norm));
                }
                acc(*input, gx);
            }
            Op::GradReverse(a) => acc(*a, g.iter().map(|x| x * self.reversal_sign).collect()),
            Op::LastStep(a) => {
                let t = *self.value(*a).shape().last().expect("checked in forward");
                let mut gx = vec![0.0; g.len() * t];
                for (i, &gv) in g.iter().enumerate() {
                    gx[i * t + t - 1] = gv;
                }
                acc(*a, gx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.shape()[1];
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for (i, &gv) in g.iter().enumerate() {
                    ga.extend(bv.row(i).iter().map(|x| x * gv));
                    gb.extend(av.row(i).iter().map(|x| x * gv));
                }
                debug_assert_eq!(ga.len(), g.len() * d);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let gp = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    acc(p, gp);
                    offset += w;
                }
            }
            Op::LogSumExpRows { input, probs } => {
                let c = probs.len() / g.len();
                let gx = probs
                    .chunks(c)
                    .zip(g)
                    .flat_map(|(row, &gv)| row.iter().map(move |p| p * gv))
                    .collect();
                acc(*input, gx);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::StandardizeCols { input, inv_std } => {
                let d = inv_std.len();
                let y = node.value.data();
                let n = y.len() / d;
                let mut sum_g = vec![0.0; d];
                let mut sum_gy = vec![0.0; d];
                for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += grow[j];
                        sum_gy[j] += grow[j] * yrow[j];
                    }
                }
                let nf = n as f64;
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                    for j in 0..d {
                        gx.push(inv_std[j] / nf * (nf * grow[j] - sum_g[j] - yrow[j] * sum_gy[j]));
                    }
                }
                acc(*input, gx);
            }
        }
    }
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// Stable log-sum-exp of `row`; writes the softmax into `probs`.
fn log_sum_exp(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    max + z.ln()
}

/// Per-column mean and biased variance of a 2-D tensor.
pub(crate) fn column_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in t.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in t.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}
