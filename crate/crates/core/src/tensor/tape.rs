use rand::Rng;

use super::conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvGeometry};
use super::norm::{normalize, normalize_backward, NormKind, NormOutput, NormStats};
use super::ops::{
    activation, activation_backward, dropout, gate, gate_backward, gaussian_noise,
    log_softmax_backward, log_softmax_over_channels, softmax_backward, softmax_over_channels,
    Activation, GateOutput,
};
use super::pool::{maxpool2d, maxpool2d_backward};
use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    Depthwise { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    Activation { input: Var, kind: Activation },
    Softmax { input: Var },
    LogSoftmax { input: Var },
    Norm { input: Var, gamma: Option<Var>, beta: Option<Var>, kind: NormKind, saved: NormOutput<T>, running: bool },
    Gate { input: Var, saved: GateOutput<T> },
    Scale { input: Var, mask: Option<Vec<T>> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { input: Var },
    SliceChannels { input: Var, start: usize },
    /// Scalar whose gradient with respect to `input` was computed alongside
    /// its value.
    Precomputed { input: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of executed operations. Inputs always precede the
/// operations consuming them, so a reverse sweep is a valid topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Option<Var>]) -> Var {
        let requires_grad = inputs.iter().flatten().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &[Some(input), Some(weight), bias]))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = depthwise_conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        Ok(self.push(out, Op::Depthwise { input, weight, bias, geom }, &[Some(input), Some(weight), bias]))
    }

    /// Records the depthwise stage then a 1×1 pointwise convolution.
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        depthwise: (Var, Option<Var>),
        pointwise: (Var, Option<Var>),
        geom: ConvGeometry,
    ) -> Result<Var> {
        let [_, pc, kh, kw] = self.value(pointwise.0).dims4()?;
        let [dc, ..] = self.value(depthwise.0).dims4()?;
        if pc != dc || kh != 1 || kw != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_separable_conv",
                left: self.value(depthwise.0).shape().to_vec(),
                right: self.value(pointwise.0).shape().to_vec(),
            });
        }
        let mid = self.depthwise_conv2d(input, depthwise.0, depthwise.1, geom)?;
        self.conv2d(mid, pointwise.0, pointwise.1, ConvGeometry::default())
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: (usize, usize)) -> Result<Var> {
        let pooled = maxpool2d(self.value(input), kernel)?;
        Ok(self.push(pooled.output, Op::MaxPool { input, argmax: pooled.argmax }, &[Some(input)]))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = activation(self.value(input), kind);
        self.push(out, Op::Activation { input, kind }, &[Some(input)])
    }

    pub fn softmax_over_channels(&mut self, input: Var) -> Result<Var> {
        let out = softmax_over_channels(self.value(input))?;
        Ok(self.push(out, Op::Softmax { input }, &[Some(input)]))
    }

    pub fn log_softmax_over_channels(&mut self, input: Var) -> Result<Var> {
        let out = log_softmax_over_channels(self.value(input))?;
        Ok(self.push(out, Op::LogSoftmax { input }, &[Some(input)]))
    }

    pub fn normalize(
        &mut self,
        input: Var,
        kind: NormKind,
        affine: Option<(Var, Var)>,
        eps: T,
        stats: NormStats<'_, T>,
    ) -> Result<Var> {
        let (gamma, beta) = (affine.map(|a| a.0), affine.map(|a| a.1));
        let running = matches!(stats, NormStats::Running { .. });
        let mut saved = normalize(
            self.value(input),
            kind,
            gamma.map(|g| self.value(g)),
            beta.map(|b| self.value(b)),
            eps,
            stats,
        )?;
        let out = std::mem::replace(&mut saved.output, Tensor::scalar(T::zero()));
        Ok(self.push(out, Op::Norm { input, gamma, beta, kind, saved, running }, &[Some(input), gamma, beta]))
    }

    /// Per-group `(mean, biased variance, group size)` measured by a
    /// normalization node.
    pub fn norm_statistics(&self, v: Var) -> Option<(&[T], &[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Norm { saved, .. } => Some((&saved.mean, &saved.var, saved.group_size)),
            _ => None,
        }
    }

    pub fn gate(&mut self, input: Var, eps: T) -> Result<Var> {
        let saved = gate(self.value(input), eps)?;
        let out = saved.output.clone();
        Ok(self.push(out, Op::Gate { input, saved }, &[Some(input)]))
    }

    /// Pre-normalization `(tanh, sigmoid)` branches of a gate node.
    pub fn gate_branches(&self, v: Var) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match &self.nodes[v.0].op {
            Op::Gate { saved, .. } => Some((&saved.tanh_branch, &saved.sigmoid_branch)),
            _ => None,
        }
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let (out, mask) = dropout(self.value(input), p, training, rng)?;
        Ok(self.push(out, Op::Scale { input, mask }, &[Some(input)]))
    }

    pub fn gaussian_noise<R: Rng + ?Sized>(&mut self, input: Var, std: f64, training: bool, rng: &mut R) -> Result<Var> {
        let out = gaussian_noise(self.value(input), std, training, rng)?;
        Ok(self.push(out, Op::Scale { input, mask: None }, &[Some(input)]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[Some(a), Some(b)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[Some(a), Some(b)]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[Some(input)])
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).slice_channels(start, len)?;
        Ok(self.push(out, Op::SliceChannels { input, start }, &[Some(input)]))
    }

    /// Records a scalar `value` whose gradient with respect to `input` is
    /// already known (e.g. a loss with a closed-form derivative).
    pub fn precomputed_scalar(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(TensorError::ShapeMismatch {
                op: "precomputed_scalar",
                left: self.value(input).shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { input, grad }, &[Some(input)]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(data) if n.requires_grad => Some(Tensor::new(n.value.shape().to_vec(), data)),
                _ => None,
            })
            .map(Option::transpose)
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let go = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let need = self.requires_grad(*input);
                let (dx, dw, db) = conv2d_backward(self.value(*input), self.value(*weight), *geom, &go, need)?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx.into_data());
                }
                self.accumulate(grads, *weight, dw.into_data());
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db.into_data());
                }
            }
            Op::Depthwise { input, weight, bias, geom } => {
                let go = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let need = self.requires_grad(*input);
                let (dx, dw, db) =
                    depthwise_conv2d_backward(self.value(*input), self.value(*weight), *geom, &go, need)?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx.into_data());
                }
                self.accumulate(grads, *weight, dw.into_data());
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db.into_data());
                }
            }
            Op::MaxPool { input, argmax } => {
                let dx = maxpool2d_backward(self.value(*input).len(), argmax, g);
                self.accumulate(grads, *input, dx);
            }
            Op::Activation { input, kind } => {
                self.accumulate(grads, *input, activation_backward(node.value.data(), g, *kind));
            }
            Op::Softmax { input } => {
                let dx = softmax_backward(node.value.dims4()?, node.value.data(), g);
                self.accumulate(grads, *input, dx);
            }
            Op::LogSoftmax { input } => {
                let dx = log_softmax_backward(node.value.dims4()?, node.value.data(), g);
                self.accumulate(grads, *input, dx);
            }
            Op::Norm { input, gamma, beta, kind, saved, running } => {
                let dims = node.value.dims4()?;
                let (dx, dgamma, dbeta) =
                    normalize_backward(dims, *kind, saved, gamma.map(|v| self.value(v)), g, *running)?;
                self.accumulate(grads, *input, dx);
                if let (Some(gv), Some(dg)) = (gamma, dgamma) {
                    self.accumulate(grads, *gv, dg);
                }
                if let Some(bv) = beta {
                    self.accumulate(grads, *bv, dbeta);
                }
            }
            Op::Gate { input, saved } => {
                self.accumulate(grads, *input, gate_backward(saved, g)?);
            }
            Op::Scale { input, mask } => {
                let dx = match mask {
                    Some(m) => g.iter().zip(m).map(|(&a, &b)| a * b).collect(),
                    None => g.to_vec(),
                };
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, vec![g[0]; self.value(*input).len()]);
            }
            Op::SliceChannels { input, start } => {
                let [b, c, h, w] = self.value(*input).dims4()?;
                let len = node.value.dims4()?[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    let src = &g[bi * len * plane..(bi + 1) * len * plane];
                    dx[(bi * c + start) * plane..][..len * plane].copy_from_slice(src);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Precomputed { input, grad } => {
                self.accumulate(grads, *input, grad.iter().map(|&v| v * g[0]).collect());
            }
        }
        Ok(())
    }
}
