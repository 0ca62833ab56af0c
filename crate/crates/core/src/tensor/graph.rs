//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! and the graph is acyclic by construction. `backward` walks it once in
//! reverse, summing the contributions of every use of a node.

use crate::error::{Error, Result};

use super::kernels::{
    self, avgpool2_backward, conv1d_as_2d, conv2d_backward, conv2d_with, conv_geometry,
    linear_backward, sigmoid, split_channels, ConvGeom, ConvSpec,
};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Softplus(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias(Var, Var),
    Concat(Var, Var),
    ReorderForDws(Var),
    ReorderFromDws(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    StraightThrough(Var),
    KlGaussian {
        mu: Var,
        sigma: Var,
        prior_sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss w.r.t. the graph's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = kernels::relu(self.value(x));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = kernels::softplus(self.value(x));
        self.unary(x, v, Op::Softplus(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let geom = conv_geometry(self.value(input), self.value(kernel), spec)?;
        let v = conv2d_with(self.value(input), self.value(kernel), &geom);
        Ok(self.binary(
            input,
            kernel,
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
        ))
    }

    /// See [`kernels::conv1d`].
    pub fn conv1d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (x4, w4, spec) = conv1d_as_2d(self.value(input), self.value(kernel), padding)?;
        let geom = conv_geometry(&x4, &w4, spec)?;
        let out = conv2d_with(&x4, &w4, &geom);
        let s = out.shape().to_vec();
        let v = Tensor::from_parts(vec![s[0], s[1], s[3]], out.into_data());
        Ok(self.binary(
            input,
            kernel,
            v,
            Op::Conv1d {
                input,
                kernel,
                geom,
            },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::shape(
                "channel_bias",
                format!("bias {bs:?} does not match channels of {xs:?}"),
            ));
        }
        let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|e| *e += bc);
        }
        Ok(self.binary(x, bias, v, Op::ChannelBias(x, bias)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.binary(a, b, v, Op::Concat(a, b)))
    }

    pub fn reorder_for_dws(&mut self, x: Var) -> Result<Var> {
        let v = kernels::reorder_for_dws(self.value(x))?;
        Ok(self.unary(x, v, Op::ReorderForDws(x)))
    }

    pub fn reorder_from_dws(
        &mut self,
        x: Var,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let v = kernels::reorder_from_dws(self.value(x), batch, height, width)?;
        Ok(self.unary(x, v, Op::ReorderFromDws(x)))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let v = kernels::avgpool2(self.value(x))?;
        Ok(self.unary(x, v, Op::AvgPool2(x)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(self.value(x))?;
        Ok(self.unary(x, v, Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let v = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            v,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `labels` under softmax of `logits` (a scalar node).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = kernels::cross_entropy(self.value(logits), labels)?;
        Ok(self.unary(
            logits,
            Tensor::scalar(v),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Forward: 8-bit per-row quantization. Backward: identity.
    pub fn quantize_ste(&mut self, x: Var, row_len: usize, bits: u32) -> Var {
        let v = kernels::quantize_rows(self.value(x), row_len, bits);
        self.unary(x, v, Op::StraightThrough(x))
    }

    /// Closed-form Gaussian KL against a zero-mean prior (a scalar node).
    pub fn kl_gaussian(&mut self, mu: Var, sigma: Var, prior_sigma: f64) -> Result<Var> {
        let v = kernels::kl_gaussian(self.value(mu), self.value(sigma), prior_sigma)?;
        Ok(self.binary(
            mu,
            sigma,
            Tensor::scalar(v),
            Op::KlGaussian {
                mu,
                sigma,
                prior_sigma,
            },
        ))
    }

    /// Gradients of the scalar `loss` w.r.t. every trainable leaf.
    ///
    /// Leaves that do not influence the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y).expect("shape"));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y).expect("shape"));
                }
            }
            Op::Scale(x, f) => acc(*x, g.map(|e| e * f)),
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape().to_vec(), s));
            }
            Op::Relu(x) => acc(
                *x,
                g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .expect("shape"),
            ),
            Op::Softplus(x) => acc(
                *x,
                g.zip_map(val(*x), |gi, xi| gi * sigmoid(xi))
                    .expect("shape"),
            ),
            Op::Reshape(x) | Op::StraightThrough(x) => acc(
                *x,
                Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()),
            ),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dw) = conv2d_backward(
                    val(*input),
                    val(*kernel),
                    geom,
                    g,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*kernel, dw);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                geom,
            } => {
                let (x, w) = (val(*input), val(*kernel));
                let (xs, ws) = (x.shape(), w.shape());
                let x4 = Tensor::from_parts(vec![xs[0], xs[1], 1, xs[2]], x.data().to_vec());
                let w4 = Tensor::from_parts(vec![ws[0], ws[1], 1, ws[2]], w.data().to_vec());
                let gs = g.shape();
                let g4 = Tensor::from_parts(vec![gs[0], gs[1], 1, gs[2]], g.data().to_vec());
                let (dx, dw) =
                    conv2d_backward(&x4, &w4, geom, &g4, self.rg(*input), self.rg(*kernel));
                if let Some(dx) = dx {
                    acc(*input, Tensor::from_parts(xs.to_vec(), dx.into_data()));
                }
                if let Some(dw) = dw {
                    acc(*kernel, Tensor::from_parts(ws.to_vec(), dw.into_data()));
                }
            }
            Op::ChannelBias(x, bias) => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    let xs = val(*x).shape();
                    let (c, inner) = (xs[1], xs[2..].iter().product::<usize>());
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Concat(a, b) => {
                let (ga, gb) = split_channels(g, val(*a).shape()[1]);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ReorderForDws(x) => {
                let s = val(*x).shape();
                acc(
                    *x,
                    kernels::reorder_from_dws(g, s[0], s[2], s[3]).expect("shape"),
                );
            }
            Op::ReorderFromDws(x) => acc(*x, kernels::reorder_for_dws(g).expect("shape")),
            Op::AvgPool2(x) => acc(*x, avgpool2_backward(val(*x).shape(), g)),
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let scale = 1.0 / hw as f64;
                let mut dx = Vec::with_capacity(val(*x).len());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat_n(gi * scale, hw));
                }
                acc(*x, Tensor::from_parts(s.to_vec(), dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = linear_backward(val(*input), val(*weight), g);
                acc(*input, dx);
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::CrossEntropy { logits, labels } => {
                let p = kernels::softmax(val(*logits)).expect("shape");
                let (b, c) = (p.shape()[0], p.shape()[1]);
                let scale = g.data()[0] / b as f64;
                let mut d = p.into_data();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|e| *e *= scale);
                acc(*logits, Tensor::from_parts(vec![b, c], d));
            }
            Op::KlGaussian {
                mu,
                sigma,
                prior_sigma,
            } => {
                let s = g.data()[0];
                let p2 = prior_sigma * prior_sigma;
                acc(*mu, val(*mu).map(|m| s * m / p2));
                acc(*sigma, val(*sigma).map(|sg| s * (sg / p2 - 1.0 / sg)));
            }
        }
    }
}
