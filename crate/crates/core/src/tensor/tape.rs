use std::collections::BTreeMap;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Sum,
    AbsMean,
    SqMean,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTransposed2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    Relu(Var),
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
    },
    DownsampleAvg {
        x: Var,
        factor: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    SpectralScale {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are created in evaluation order, so every node's inputs precede it
/// and [`Tape::backward`] is a single reverse sweep. A node requires a
/// gradient when it is a parameter or depends on one; branches built only
/// from constants are skipped entirely during the sweep.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the loss with respect to the parameter nodes reachable from
/// it. Unreachable parameters have no entry.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Real = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn broadcast_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!(
                "operands {:?} and {:?} are neither equal nor scalar-broadcastable",
                a.shape(),
                b.shape()
            ),
        ))
    }
}

fn zip_broadcast<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (sa, sb) = (usize::from(ad.len() != 1), usize::from(bd.len() != 1));
    let data = (0..n).map(|i| f(ad[i * sa], bd[i * sb])).collect();
    Tensor::from_vec(shape, data)
}

/// Folds a broadcast gradient back to an operand's shape.
fn unbroadcast<T: Real>(grad: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        grad
    } else {
        Tensor::from_vec(shape, vec![grad.sum()])
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Copies a node's value into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn push_node(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        is_param: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Option<Var>]) -> Var {
        let requires_grad = inputs
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[Some(x), Some(w), b],
        ))
    }

    pub fn conv2d_transposed(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_transposed(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::ConvTransposed2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[Some(x), Some(w), b],
        ))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = kernels::reflect_pad(self.value(x), pad)?;
        Ok(self.push(out, Op::ReflectPad { x, pad }, &[Some(x)]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[Some(x)])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let alpha = T::lit(alpha);
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { alpha * v });
        self.push(out, Op::LeakyRelu { x, alpha }, &[Some(x)])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[Some(x)])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("add", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[Some(a), Some(b)]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("sub", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[Some(a), Some(b)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape("mul", self.value(a), self.value(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), &shape, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[Some(a), Some(b)]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::lit(factor);
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[Some(x)])
    }

    /// `x + offset` for a constant offset.
    pub fn shift(&mut self, x: Var, offset: f64) -> Var {
        let offset = T::lit(offset);
        let out = self.value(x).map(|v| v + offset);
        self.push(out, Op::Shift { x }, &[Some(x)])
    }

    pub fn reduce(&mut self, x: Var, kind: ReduceKind) -> Var {
        let input = self.value(x);
        let n = T::from_usize_lossy(input.numel());
        let value = match kind {
            ReduceKind::Sum => input.sum(),
            ReduceKind::Mean => input.sum() / n,
            ReduceKind::AbsMean => input.data().iter().map(|v| v.abs()).sum::<T>() / n,
            ReduceKind::SqMean => input.data().iter().map(|&v| v * v).sum::<T>() / n,
        };
        self.push(Tensor::scalar(value), Op::Reduce { x, kind }, &[Some(x)])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::Mean)
    }

    pub fn abs_mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::AbsMean)
    }

    pub fn sq_mean(&mut self, x: Var) -> Var {
        self.reduce(x, ReduceKind::SqMean)
    }

    pub fn downsample_avg(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::downsample_avg(self.value(x), factor)?;
        Ok(self.push(out, Op::DownsampleAvg { x, factor }, &[Some(x)]))
    }

    /// Per (item, channel) standardization over spatial positions followed by
    /// an optional per-channel affine.
    pub fn instance_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let input = self.value(x);
        let (n, c, h, w) = input.dims4()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if self.value(p).shape() != [c] {
                    return Err(Error::shape(
                        "instance_norm",
                        format!(
                            "{name} {:?} does not match {c} channels of input {:?}",
                            self.value(p).shape(),
                            input.shape()
                        ),
                    ));
                }
            }
        }
        let plane = h * w;
        let count = T::from_usize_lossy(plane);
        let eps = T::lit(eps);
        let mut mean = Vec::with_capacity(n * c);
        let mut inv_std = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(input.numel());
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        for (idx, chunk) in input.data().chunks(plane).enumerate() {
            let ch = idx % c;
            let mu = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
            let is = T::one() / (var + eps).sqrt();
            let g = gv.as_ref().map_or(T::one(), |g| g[ch]);
            let b = bv.as_ref().map_or(T::zero(), |b| b[ch]);
            out.extend(chunk.iter().map(|&v| g * (v - mu) * is + b));
            mean.push(mu);
            inv_std.push(is);
        }
        let out = Tensor::from_vec(input.shape(), out);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[Some(x), gamma, beta],
        ))
    }

    /// `w / sigma` with `sigma = u^T W v`, where `W` is `w` flattened to
    /// `(out_features, rest)` and the singular-vector estimates are held
    /// constant for differentiation.
    pub fn spectral_scale(
        &mut self,
        w: Var,
        u: &[T],
        v: &[T],
        sigma_floor: f64,
    ) -> Result<(Var, T)> {
        let weight = self.value(w);
        let rows = weight.shape()[0];
        let cols = weight.numel() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::shape(
                "spectral_scale",
                format!(
                    "weight {:?} is {rows}x{cols} but u has {} and v has {} entries",
                    weight.shape(),
                    u.len(),
                    v.len()
                ),
            ));
        }
        let sigma = bilinear(weight.data(), u, v).max(T::lit(sigma_floor));
        let out = weight.map(|x| x / sigma);
        let op = Op::SpectralScale {
            w,
            u: u.to_vec(),
            v: v.to_vec(),
            sigma,
        };
        Ok((self.push(out, op, &[Some(w)]), sigma))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()]));
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.is_param {
                out.grads.insert(Var(id), g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b);
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::ConvTransposed2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = kernels::conv2d_transposed_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::ReflectPad { x, pad } => {
                let dx = kernels::reflect_pad_backward(g, self.value(x).shape(), pad);
                self.accumulate(grads, x, dx);
            }
            &Op::Relu(x) => {
                let y = &node.value;
                let dx = zip_same(g, y, |g, y| if y > T::zero() { g } else { T::zero() });
                self.accumulate(grads, x, dx);
            }
            &Op::LeakyRelu { x, alpha } => {
                let xv = self.value(x);
                let dx = zip_same(g, xv, |g, x| if x >= T::zero() { g } else { alpha * g });
                self.accumulate(grads, x, dx);
            }
            &Op::Tanh(x) => {
                let dx = zip_same(g, &node.value, |g, y| g * (T::one() - y * y));
                self.accumulate(grads, x, dx);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, unbroadcast(g.clone(), self.value(a).shape()));
                self.accumulate(grads, b, unbroadcast(g.clone(), self.value(b).shape()));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, unbroadcast(g.clone(), self.value(a).shape()));
                self.accumulate(grads, b, unbroadcast(g.map(|v| -v), self.value(b).shape()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = zip_broadcast(g, bv, g.shape(), |g, y| g * y);
                    self.accumulate(grads, a, unbroadcast(da, av.shape()));
                }
                if self.wants(b) {
                    let db = zip_broadcast(g, av, g.shape(), |g, x| g * x);
                    self.accumulate(grads, b, unbroadcast(db, bv.shape()));
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.map(|v| v * factor));
            }
            &Op::Shift { x } => {
                self.accumulate(grads, x, g.clone());
            }
            &Op::Reduce { x, kind } => {
                let xv = self.value(x);
                let seed = g.item();
                let n = T::from_usize_lossy(xv.numel());
                let dx = match kind {
                    ReduceKind::Sum => Tensor::full(xv.shape(), seed),
                    ReduceKind::Mean => Tensor::full(xv.shape(), seed / n),
                    ReduceKind::AbsMean => xv.map(|v| {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        seed * s / n
                    }),
                    ReduceKind::SqMean => {
                        let two = T::lit(2.0);
                        xv.map(|v| seed * two * v / n)
                    }
                };
                self.accumulate(grads, x, dx);
            }
            &Op::DownsampleAvg { x, factor } => {
                let dx = kernels::downsample_avg_backward(g, self.value(x).shape(), factor);
                self.accumulate(grads, x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => self.instance_norm_backward(*x, *gamma, *beta, mean, inv_std, g, grads),
            Op::SpectralScale { w, u, v, sigma } => {
                let wv = self.value(*w);
                let sigma = *sigma;
                let cols = v.len();
                let coeff = kernels::dot(g.data(), wv.data()) / (sigma * sigma);
                let inv = T::one() / sigma;
                let mut data = Vec::with_capacity(g.numel());
                for (row, &ui) in g.data().chunks(cols).zip(u) {
                    let cu = coeff * ui;
                    data.extend(row.iter().zip(v).map(|(&gi, &vj)| gi * inv - cu * vj));
                }
                self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), data));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn instance_norm_backward(
        &self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[T],
        inv_std: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let (_, c, h, w) = xv.dims4().expect("validated in forward");
        let plane = h * w;
        let count = T::from_usize_lossy(plane);
        let gv = gamma.map(|p| self.value(p).data().to_vec());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = self.wants(x).then(|| Vec::with_capacity(xv.numel()));
        for (idx, (xs, gs)) in xv
            .data()
            .chunks(plane)
            .zip(g.data().chunks(plane))
            .enumerate()
        {
            let ch = idx % c;
            let (mu, is) = (mean[idx], inv_std[idx]);
            let scale = gv.as_ref().map_or(T::one(), |g| g[ch]);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&xi, &gi) in xs.iter().zip(gs) {
                let xhat = (xi - mu) * is;
                sum_g += gi;
                sum_gx += gi * xhat;
            }
            dgamma[ch] += sum_gx;
            dbeta[ch] += sum_g;
            if let Some(dx) = dx.as_mut() {
                let k = scale * is / count;
                dx.extend(xs.iter().zip(gs).map(|(&xi, &gi)| {
                    let xhat = (xi - mu) * is;
                    k * (count * gi - sum_g - xhat * sum_gx)
                }));
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if let Some(gamma) = gamma {
            self.accumulate(grads, gamma, Tensor::from_vec(&[c], dgamma));
        }
        if let Some(beta) = beta {
            self.accumulate(grads, beta, Tensor::from_vec(&[c], dbeta));
        }
    }
}

fn zip_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// `u^T W v` for row-major `W` of `u.len() x v.len()`.
pub(crate) fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    w.chunks(v.len())
        .zip(u)
        .map(|(row, &ui)| ui * kernels::dot(row, v))
        .sum()
}
