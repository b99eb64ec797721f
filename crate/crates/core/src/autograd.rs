//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Gradients accumulate additively when a value fans out to several
//! consumers. A tape belongs to one training step: build it, call
//! `backward`, read the gradients, drop it.

use alloc::vec;
use alloc::vec::Vec;

use crate::contrastive::{self, Pairing};
use crate::convcrf::{self, KernelOrientation};
use crate::ops;
use crate::{Error, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        indices: Vec<u32>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: Var,
    },
    Sum(Var),
    Square(Var),
    NtXent {
        z: Var,
        dz: Tensor,
    },
    GaussianKernel {
        theta: Var,
        features: Tensor,
        filter_size: usize,
        orientation: KernelOrientation,
    },
    MessagePass {
        kernel: Var,
        probs: Var,
    },
    SoftmaxChannels(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<u8>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that rejects NaN/Inf after every operation.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    /// A tape without the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Tape {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialized as zeros when no path reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| self.value(v).zeros_like())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.checked {
            value.check_finite(name)?;
        }
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        Ok(self.push(value, op, requires_grad))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d_bias(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.record(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &parents,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.record("relu", out, Op::Relu(x), &[x])
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, indices) = ops::maxpool2d_with_indices(self.value(x))?;
        self.record("maxpool2d", out, Op::MaxPool2d { input: x, indices }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        self.record("upsample2x", out, Op::Upsample2x(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        self.record("concat_channels", out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.record("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// `x[n, in] * w[out, in]^T`
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w))?;
        self.record("linear", out, Op::Linear { input: x, weight: w }, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `factor * x` where `factor` holds a single element.
    pub fn scale(&mut self, x: Var, factor: Var) -> Result<Var> {
        let s = self.value(factor).item()?;
        let out = self.value(x).map(|v| v * s);
        self.record("scale", out, Op::Scale { input: x, factor }, &[x, factor])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record("sum", out, Op::Sum(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.record("square", out, Op::Square(x), &[x])
    }

    /// NT-Xent loss of the rows of `z` under `pairing` at temperature `tau`.
    pub fn nt_xent(&mut self, z: Var, pairing: &Pairing, tau: f32) -> Result<Var> {
        let (loss, dz) = contrastive::nt_xent_with_grad(self.value(z), pairing, tau)?;
        self.record("nt_xent", Tensor::scalar(loss), Op::NtXent { z, dz }, &[z])
    }

    /// Unnormalized Gaussian kernel matrix `[b, k, k, h, w]` of a feature map
    /// `[b, d, h, w]` with per-dimension bandwidths `theta` (shape `[d]`).
    pub fn gaussian_kernel(
        &mut self,
        features: &Tensor,
        theta: Var,
        filter_size: usize,
        orientation: KernelOrientation,
    ) -> Result<Var> {
        let out =
            convcrf::gaussian_kernel(features, self.value(theta).data(), filter_size, orientation)?;
        self.record(
            "gaussian_kernel",
            out,
            Op::GaussianKernel {
                theta,
                features: features.clone(),
                filter_size,
                orientation,
            },
            &[theta],
        )
    }

    pub fn message_pass(&mut self, kernel: Var, probs: Var) -> Result<Var> {
        let out = convcrf::message_pass_raw(self.value(kernel), self.value(probs))?;
        self.record(
            "message_pass",
            out,
            Op::MessagePass { kernel, probs },
            &[kernel, probs],
        )
    }

    /// Softmax over the channel axis of `[b, c, h, w]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = convcrf::softmax_channels(self.value(x))?;
        self.record("softmax_channels", out, Op::SoftmaxChannels(x), &[x])
    }

    /// Mean pixelwise cross-entropy of `softmax_channels(logits)` against
    /// integer `labels` (one per `[b, h, w]` position).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (loss, probs) = convcrf::softmax_cross_entropy(self.value(logits), labels)?;
        self.record(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = self.value(loss);
        if value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        let seed = Tensor::ones(value.shape())?;
        self.backward_with(loss, seed)
    }

    /// Reverse sweep from `output` with an explicit upstream gradient.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::mismatch(
                "backward",
                seed.shape(),
                self.value(output).shape(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.local_grads(i, &op, g);
        self.nodes[i].op = op;
        for (v, dv) in result? {
            self.accumulate(v, dv)?;
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its parents.
    fn local_grads(&self, i: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::with_capacity(3);
        match op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.needs(input),
                    self.needs(weight),
                    bias.is_some_and(|b| self.needs(b)),
                )?;
                out.extend(dx.map(|d| (input, d)));
                out.extend(dw.map(|d| (weight, d)));
                if let (Some(b), Some(db)) = (bias, db) {
                    out.push((b, db));
                }
            }
            &Op::Relu(x) => {
                let dx = self.value(x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                out.push((x, dx));
            }
            Op::MaxPool2d { input, indices } => {
                let mut dx = self.value(*input).zeros_like();
                for (&src, &gv) in indices.iter().zip(g.data()) {
                    dx.data_mut()[src as usize] += gv;
                }
                out.push((*input, dx));
            }
            &Op::Upsample2x(x) => {
                out.push((x, ops::upsample2x_backward(g, self.value(x).shape())?));
            }
            &Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.value(a).dims4()?;
                let cb = self.value(b).dims4()?[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * sa);
                let mut dbv = Vec::with_capacity(n * sb);
                for chunk in g.data().chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    dbv.extend_from_slice(&chunk[sa..]);
                }
                out.push((a, Tensor::new(&[n, ca, h, w], da)?));
                out.push((b, Tensor::new(&[n, cb, h, w], dbv)?));
            }
            &Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(x).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f32;
                let mut dx = self.value(x).zeros_like();
                for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gv * inv);
                }
                out.push((x, dx));
            }
            &Op::Linear { input, weight } => {
                let (dx, dw) = ops::linear_backward(self.value(input), self.value(weight), g)?;
                out.push((input, dx));
                out.push((weight, dw));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                out.push((a, g.zip_map(self.value(b), |gv, bv| gv * bv)?));
                out.push((b, g.zip_map(self.value(a), |gv, av| gv * av)?));
            }
            &Op::Scale { input, factor } => {
                let s = self.value(factor).item()?;
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(input).data())
                    .map(|(&gv, &xv)| gv as f64 * xv as f64)
                    .sum();
                out.push((input, g.map(|gv| gv * s)));
                out.push((factor, Tensor::new(self.value(factor).shape(), vec![ds as f32])?));
            }
            &Op::Sum(x) => {
                out.push((x, Tensor::full(self.value(x).shape(), g.item()?)?));
            }
            &Op::Square(x) => {
                out.push((x, self.value(x).zip_map(g, |v, gv| 2.0 * v * gv)?));
            }
            Op::NtXent { z, dz } => {
                let gv = g.item()?;
                out.push((*z, dz.map(|v| v * gv)));
            }
            Op::GaussianKernel {
                theta,
                features,
                filter_size,
                orientation,
            } => {
                let dtheta = convcrf::gaussian_kernel_theta_grad(
                    features,
                    self.value(*theta).data(),
                    *filter_size,
                    *orientation,
                    &self.nodes[i].value,
                    g,
                )?;
                out.push((*theta, dtheta));
            }
            &Op::MessagePass { kernel, probs } => {
                let (dk, dp) =
                    convcrf::message_pass_backward(self.value(kernel), self.value(probs), g)?;
                out.push((kernel, dk));
                out.push((probs, dp));
            }
            &Op::SoftmaxChannels(x) => {
                out.push((x, convcrf::softmax_channels_backward(&self.nodes[i].value, g)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let dx = convcrf::softmax_cross_entropy_backward(probs, labels, g.item()?)?;
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}
