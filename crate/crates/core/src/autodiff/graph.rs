use super::kernels::{self, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm layer treats its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; gradients flow through them.
    Train,
    /// Normalize with the layer's running statistics.
    Eval,
    /// Normalize with batch statistics treated as constants, so the backward
    /// pass only sees the affine transform. Running statistics still update.
    StatOnly,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

/// Per-channel statistics of one batch-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Abs,
    Square,
    Scale(f64),
    AddConst(f64),
    /// `ln(max(x, floor))`; zero gradient below the floor.
    LogFloor(f64),
    /// `x ln x`, with the `x <= 0` limit taken as 0.
    XLogX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        detached: bool,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Softmax {
        x: Var,
    },
    LogSumExp {
        x: Var,
        weights: Vec<S>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<S>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A reverse-mode gradient tape.
///
/// Nodes are appended as operators run, so every node's parents precede it.
/// A tape supports exactly one [`backward`](Graph::backward) pass.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf, or `None` if the leaf does not require gradients
    /// or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, delta: Vec<S>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    /// Registers a leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stride-1 convolution with zero padding `k / 2` on an `N x C x H x W` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "conv2d weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            h: xs[2],
            w: xs[3],
            k: ws[2],
        };
        if let Some(b) = b {
            same_shape(self.value(b).shape(), &[geom.c_out], "conv2d bias")?;
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.n, geom.c_out, geom.h, geom.w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalization over the `N, H, W` axes of an `N x C x H x W` input
    /// (or the `N` axis of an `N x C` input).
    ///
    /// In [`BnMode::Eval`], `running` supplies the statistics. Otherwise the
    /// batch statistics are returned so the caller can fold them into its
    /// running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &ChannelStats,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<ChannelStats>)> {
        let (n, c, inner) = self.value(x).class_layout()?;
        same_shape(self.value(gamma).shape(), &[c], "batch_norm gamma")?;
        same_shape(self.value(beta).shape(), &[c], "batch_norm beta")?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm running stats have {} channels, input has {c}",
                running.mean.len()
            )));
        }
        if mode.uses_batch_stats() && n < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm in {mode:?} mode needs a batch of at least 2, got {n}"
            )));
        }
        let xd = self.value(x).data();
        let count = (n * inner) as f64;
        let stats = if mode.uses_batch_stats() {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for (ch, m) in mean.iter_mut().enumerate() {
                let mut s = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * inner;
                    s += xd[start..start + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                *m = s / count;
            }
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let start = (b * c + ch) * inner;
                    s += xd[start..start + inner]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean[ch];
                            d * d
                        })
                        .sum::<f64>();
                }
                var[ch] = s / count;
            }
            ChannelStats { mean, var }
        } else {
            running.clone()
        };
        let inv_std: Vec<S> = stats.var.iter().map(|v| S::of(1.0 / (v + eps).sqrt())).collect();
        let mean_s: Vec<S> = stats.mean.iter().map(|&m| S::of(m)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * inner;
                for i in start..start + inner {
                    let h = (xd[i] - mean_s[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let detached = mode != BnMode::Train;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                detached,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var, mode.uses_batch_stats().then_some(stats)))
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(S::zero()),
                UnaryKind::Sigmoid => S::one() / (S::one() + (-v).exp()),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Square => v * v,
                UnaryKind::Scale(c) => v * S::of(c),
                UnaryKind::AddConst(c) => v + S::of(c),
                UnaryKind::LogFloor(f) => v.max(S::of(f)).ln(),
                UnaryKind::XLogX => {
                    if v > S::zero() {
                        v * v.ln()
                    } else {
                        S::zero()
                    }
                }
            })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(value, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        same_shape(self.value(a).shape(), self.value(b).shape(), "elementwise operands")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Softmax over axis 1 of an `[N, C, rest..]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.all_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let (n, c, inner) = src.class_layout()?;
        if c == 0 {
            return Err(Error::Shape("softmax over an empty class axis".into()));
        }
        let data = softmax_axis1(src.data(), n, c, inner, S::one());
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// `t * ln(sum_i exp(z_i / t))` over axis 1 of an `[N, C, rest..]` tensor,
    /// evaluated in max-shifted form. The class axis is removed.
    pub fn logsumexp(&mut self, x: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "logsumexp temperature must be positive, got {t}"
            )));
        }
        let src = self.value(x);
        if !src.all_finite() {
            return Err(Error::NonFinite("logsumexp input"));
        }
        let (n, c, inner) = src.class_layout()?;
        if c == 0 {
            return Err(Error::Shape("logsumexp over an empty class axis".into()));
        }
        let zd = src.data();
        let inv_t = S::of(1.0 / t);
        let tt = S::of(t);
        let weights = softmax_axis1(zd, n, c, inner, inv_t);
        let mut out = vec![S::zero(); n * inner];
        for b in 0..n {
            for s in 0..inner {
                let at = |k: usize| zd[(b * c + k) * inner + s];
                let mut mx = at(0);
                for k in 1..c {
                    mx = mx.max(at(k));
                }
                let mut acc = S::zero();
                for k in 0..c {
                    acc = acc + ((at(k) - mx) * inv_t).exp();
                }
                out[b * inner + s] = mx + tt * acc.ln();
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&src.shape()[2..]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp { x, weights }, rg))
    }

    /// Picks `x[n, index[n, s], s]` from an `[N, C, rest..]` tensor; `index`
    /// runs over the `N * prod(rest)` positions in row-major order.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let src = self.value(x);
        let (n, c, inner) = src.class_layout()?;
        if index.len() != n * inner {
            return Err(Error::Shape(format!(
                "gather index has {} entries, expected {}",
                index.len(),
                n * inner
            )));
        }
        if let Some(bad) = index.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {c} classes"
            )));
        }
        let d = src.data();
        let out = index
            .iter()
            .enumerate()
            .map(|(pos, &k)| {
                let (b, s) = (pos / inner, pos % inner);
                d[(b * c + k) * inner + s]
            })
            .collect();
        let mut shape = vec![n];
        shape.extend_from_slice(&src.shape()[2..]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<S>) -> Result<Var> {
        let src = self.value(x);
        if weights.len() != src.len() {
            return Err(Error::Shape(format!(
                "weighted_sum has {} weights for {} elements",
                weights.len(),
                src.len()
            )));
        }
        let s = src.data().iter().zip(&weights).map(|(&a, &w)| a * w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![S::one(); n]).expect("weights sized to input")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let w = S::of(1.0 / n.max(1) as f64);
        self.weighted_sum(x, vec![w; n]).expect("weights sized to input")
    }

    /// `x W^T + b` for `x: N x F`, `W: K x F`, `b: K`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, f, k) = (xs[0], xs[1], ws[0]);
        same_shape(self.value(b).shape(), &[k], "linear bias")?;
        let mut out = vec![S::zero(); n * k];
        for row in out.chunks_mut(k) {
            row.copy_from_slice(self.value(b).data());
        }
        S::gemm(
            n,
            f,
            k,
            S::one(),
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            1,
            f as isize,
            S::one(),
            &mut out,
            k as isize,
            1,
        );
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Mean over `H, W` of an `N x C x H x W` tensor, giving `N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.ndim() != 4 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects 4-d input, got {:?}",
                src.shape()
            )));
        }
        let (n, c, inner) = src.class_layout()?;
        let inv = S::of(1.0 / inner as f64);
        let out = src
            .data()
            .chunks(inner)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches leaf"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_x = self.rg(*x);
                let cg = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), dy, need_x);
                if let Some(gx) = cg.input {
                    add_into(&mut grads[x.0], gx);
                }
                if self.rg(*w) {
                    add_into(&mut grads[w.0], cg.weight);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        add_into(&mut grads[b.0], cg.bias);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                detached,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = self.value(*x).class_layout()?;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * inner;
                        for k in start..start + inner {
                            dgamma[ch] = dgamma[ch] + dy[k] * xhat[k];
                            dbeta[ch] = dbeta[ch] + dy[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); dy.len()];
                    let m = S::of((n * inner) as f64);
                    for ch in 0..c {
                        // dxhat = dy * gamma; sums of dxhat and dxhat * xhat equal
                        // gamma * dbeta and gamma * dgamma.
                        let s1 = g[ch] * dbeta[ch];
                        let s2 = g[ch] * dgamma[ch];
                        for b in 0..n {
                            let start = (b * c + ch) * inner;
                            for k in start..start + inner {
                                let dxhat = dy[k] * g[ch];
                                dx[k] = if *detached {
                                    dxhat * inv_std[ch]
                                } else {
                                    inv_std[ch] / m * (m * dxhat - s1 - xhat[k] * s2)
                                };
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = dy
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&d, (&a, &y))| match kind {
                        UnaryKind::Relu => {
                            if a > S::zero() {
                                d
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Sigmoid => d * y * (S::one() - y),
                        UnaryKind::Abs => {
                            if a > S::zero() {
                                d
                            } else if a < S::zero() {
                                -d
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::Square => d * S::of(2.0) * a,
                        UnaryKind::Scale(c) => d * S::of(*c),
                        UnaryKind::AddConst(_) => d,
                        UnaryKind::LogFloor(f) => {
                            if a > S::of(*f) {
                                d / a
                            } else {
                                S::zero()
                            }
                        }
                        UnaryKind::XLogX => {
                            if a > S::zero() {
                                d * (a.ln() + S::one())
                            } else {
                                S::zero()
                            }
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::Binary { a, b, kind } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => dy.to_vec(),
                        BinaryKind::Mul => dy.iter().zip(bv).map(|(&d, &y)| d * y).collect(),
                    };
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let db = match kind {
                        BinaryKind::Add => dy.to_vec(),
                        BinaryKind::Sub => dy.iter().map(|&d| -d).collect(),
                        BinaryKind::Mul => dy.iter().zip(av).map(|(&d, &x)| d * x).collect(),
                    };
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Softmax { x } => {
                let (n, c, inner) = node.value.class_layout()?;
                let p = node.value.data();
                let mut dx = vec![S::zero(); p.len()];
                for b in 0..n {
                    for s in 0..inner {
                        let idx = |k: usize| (b * c + k) * inner + s;
                        let dot: S = (0..c).map(|k| dy[idx(k)] * p[idx(k)]).sum();
                        for k in 0..c {
                            dx[idx(k)] = p[idx(k)] * (dy[idx(k)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::LogSumExp { x, weights } => {
                let (n, c, inner) = self.value(*x).class_layout()?;
                let mut dx = vec![S::zero(); weights.len()];
                for b in 0..n {
                    for k in 0..c {
                        for s in 0..inner {
                            let idx = (b * c + k) * inner + s;
                            dx[idx] = weights[idx] * dy[b * inner + s];
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Gather { x, index } => {
                let (_, c, inner) = self.value(*x).class_layout()?;
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (pos, &k) in index.iter().enumerate() {
                    let (b, s) = (pos / inner, pos % inner);
                    let idx = (b * c + k) * inner + s;
                    dx[idx] = dx[idx] + dy[pos];
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::WeightedSum { x, weights } => {
                let d = dy[0];
                add_into(&mut grads[x.0], weights.iter().map(|&w| w * d).collect());
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, f) = (xs[0], xs[1]);
                let k = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); n * f];
                    S::gemm(
                        n,
                        k,
                        f,
                        S::one(),
                        dy,
                        k as isize,
                        1,
                        self.value(*w).data(),
                        f as isize,
                        1,
                        S::zero(),
                        &mut dx,
                        f as isize,
                        1,
                    );
                    add_into(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![S::zero(); k * f];
                    S::gemm(
                        k,
                        n,
                        f,
                        S::one(),
                        dy,
                        1,
                        k as isize,
                        self.value(*x).data(),
                        f as isize,
                        1,
                        S::zero(),
                        &mut dw,
                        f as isize,
                        1,
                    );
                    add_into(&mut grads[w.0], dw);
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k];
                    for row in dy.chunks(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, inner) = self.value(*x).class_layout()?;
                let inv = S::of(1.0 / inner as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &d in dy {
                    dx.extend(std::iter::repeat_n(d * inv, inner));
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Reshape { x } => {
                add_into(&mut grads[x.0], dy.to_vec());
            }
        }
        Ok(())
    }
}

/// Softmax of `scale * z` along axis 1, max-shifted.
fn softmax_axis1<S: Scalar>(z: &[S], n: usize, c: usize, inner: usize, scale: S) -> Vec<S> {
    let mut out = vec![S::zero(); z.len()];
    for b in 0..n {
        for s in 0..inner {
            let idx = |k: usize| (b * c + k) * inner + s;
            let mut mx = z[idx(0)];
            for k in 1..c {
                mx = mx.max(z[idx(k)]);
            }
            let mut total = S::zero();
            for k in 0..c {
                let e = ((z[idx(k)] - mx) * scale).exp();
                out[idx(k)] = e;
                total = total + e;
            }
            for k in 0..c {
                out[idx(k)] = out[idx(k)] / total;
            }
        }
    }
    out
}
