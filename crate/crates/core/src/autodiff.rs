//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is a topological order of the graph. `backward`
//! walks the records once, in reverse, accumulating vector-Jacobian
//! products. A tape is single-threaded; independent tapes may live on
//! different threads.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_raw, ConvGeom, Tensor};

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    AddBias(usize, usize),
    Relu(usize),
    Tanh(usize),
    GlobalAvgPool(usize),
    Mean(usize),
    Sum(usize),
    L2Normalize(usize),
    Cosine(usize, usize),
    Upsample(usize, usize),
    Concat(usize, usize),
    Reshape(usize),
    CrossEntropy(usize, Vec<usize>),
}

struct Node<S: Scalar> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
}

/// Operation record for one differentiable computation.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar = f32> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Arc<Tensor<S>>, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Arc::new(value), Op::Leaf)
    }

    /// Differentiable input sharing an existing allocation.
    pub fn leaf_shared(&self, value: Arc<Tensor<S>>) -> Var<'_, S> {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input; gradients are never propagated into it.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Arc::new(value), Op::Constant)
    }

    pub fn constant_shared(&self, value: Arc<Tensor<S>>) -> Var<'_, S> {
        self.push(value, Op::Constant)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn check<'t>(&'t self, v: &Var<'t, S>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::NotTraced)
        }
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// Variables that do not influence `root` receive zero gradients.
    pub fn backward(&self, root: Var<'_, S>, wrt: &[Var<'_, S>]) -> Result<Vec<Tensor<S>>> {
        self.check(&root)?;
        for v in wrt {
            self.check(v)?;
        }
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![S::one()]);
        let mut kept: Vec<(usize, Vec<S>)> = Vec::new();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wrt.iter().any(|v| v.id == id) {
                kept.push((id, g.clone()));
            }
            let node = &nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => continue,
                Op::Add(a, b) => {
                    accumulate(&mut grads, &nodes, *a, g.clone());
                    accumulate(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, &nodes, *a, g);
                    accumulate(&mut grads, &nodes, *b, neg);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let ga = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                    let gb = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, &nodes, *a, g),
                Op::MatMul(a, b) => {
                    let at = &nodes[*a].value;
                    let bt = &nodes[*b].value;
                    let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                    let bt_t = bt.transpose2()?;
                    let at_t = at.transpose2()?;
                    let ga = matmul_raw(&g, bt_t.data(), m, n, k);
                    let gb = matmul_raw(at_t.data(), &g, k, m, n);
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let geom = ConvGeom::new(xv, wv, *stride, *pad)?;
                    if let Some(b) = bias {
                        let plane = geom.ho * geom.wo;
                        let mut gb = vec![S::zero(); geom.co];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % geom.co] = gb[i % geom.co] + chunk.iter().copied().sum::<S>();
                        }
                        accumulate(&mut grads, &nodes, *b, gb);
                    }
                    if needs_grad(&nodes, *w) {
                        let gw = geom.backward_weight(&g, xv.data());
                        accumulate(&mut grads, &nodes, *w, gw);
                    }
                    if needs_grad(&nodes, *x) {
                        let gx = geom.backward_input(&g, wv.data());
                        accumulate(&mut grads, &nodes, *x, gx);
                    }
                }
                Op::AddBias(x, b) => {
                    let xv = &nodes[*x].value;
                    let c = xv.shape()[1];
                    let inner = xv.numel() / (xv.shape()[0] * c);
                    let mut gb = vec![S::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        gb[(i / inner) % c] = gb[(i / inner) % c] + v;
                    }
                    accumulate(&mut grads, &nodes, *x, g);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Relu(a) => {
                    let av = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(&g, &y)| g * (S::one() - y * y))
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::GlobalAvgPool(a) => {
                    let (_, _, h, w) = nodes[*a].value.dims4("global_avg_pool")?;
                    let inv = S::of(1.0 / (h * w) as f64);
                    let ga = g
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, h * w))
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    let ga = vec![g[0] / S::of(n as f64); n];
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    accumulate(&mut grads, &nodes, *a, vec![g[0]; n]);
                }
                Op::L2Normalize(a) => {
                    let norm = nodes[*a].value.norm_l2();
                    let y = out.data();
                    let yg: S = y.iter().zip(&g).map(|(&y, &g)| y * g).sum();
                    let ga = g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| (g - y * yg) / norm)
                        .collect();
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Cosine(a, b) => {
                    let (ga, gb) = cosine_vjp(&nodes[*a].value, &nodes[*b].value, g[0]);
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::Upsample(a, f) => {
                    let (n, c, h, w) = nodes[*a].value.dims4("upsample")?;
                    let ow = w * f;
                    let mut ga = vec![S::zero(); n * c * h * w];
                    for (p, gplane) in g.chunks(h * f * ow).enumerate() {
                        for (idx, &v) in gplane.iter().enumerate() {
                            let (y, x) = (idx / ow, idx % ow);
                            let dst = p * h * w + (y / f) * w + x / f;
                            ga[dst] = ga[dst] + v;
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = nodes[*a].value.dims4("concat")?;
                    let cb = nodes[*b].value.shape()[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut ga = Vec::with_capacity(n * sa);
                    let mut gb = Vec::with_capacity(n * sb);
                    for chunk in g.chunks(sa + sb) {
                        ga.extend_from_slice(&chunk[..sa]);
                        gb.extend_from_slice(&chunk[sa..]);
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                    accumulate(&mut grads, &nodes, *b, gb);
                }
                Op::CrossEntropy(a, labels) => {
                    let logits = &nodes[*a].value;
                    let p = logits.softmax_rows()?;
                    let k = logits.shape()[1];
                    let scale = g[0] / S::of(labels.len() as f64);
                    let mut ga: Vec<S> = p.data().iter().map(|&v| v * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        ga[i * k + y] = ga[i * k + y] - scale;
                    }
                    accumulate(&mut grads, &nodes, *a, ga);
                }
            }
        }

        wrt.iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape().to_vec();
                match kept.iter().find(|(id, _)| *id == v.id) {
                    Some((_, g)) => Tensor::from_op("backward", shape, g.clone()),
                    None => Ok(Tensor::zeros(shape)),
                }
            })
            .collect()
    }
}

fn needs_grad<S: Scalar>(nodes: &[Node<S>], id: usize) -> bool {
    !matches!(nodes[id].op, Op::Constant)
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], id: usize, g: Vec<S>) {
    if !needs_grad(nodes, id) {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e = *e + v),
        slot @ None => *slot = Some(g),
    }
}

/// VJP of `cos(a, b)`. At `a == b` the similarity is maximal and the exact
/// gradient is zero; that case is returned exactly instead of as rounding
/// residue.
fn cosine_vjp<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: S) -> (Vec<S>, Vec<S>) {
    if a.data() == b.data() {
        return (vec![S::zero(); a.numel()], vec![S::zero(); b.numel()]);
    }
    let na = a.norm_l2();
    let nb = b.norm_l2();
    let c = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum::<S>() / (na * nb);
    let ga = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| g * (y / nb - c * x / na) / na)
        .collect();
    let gb = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| g * (x / na - c * y / nb) / nb)
        .collect();
    (ga, gb)
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Arc<Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t, S>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::NotTraced)
        }
    }

    fn unary(&self, f: impl FnOnce(&Tensor<S>) -> Result<Tensor<S>>, op: Op<S>) -> Result<Self> {
        let v = f(&self.value())?;
        Ok(self.tape.push(Arc::new(v), op))
    }

    fn binary(
        &self,
        other: &Var<'t, S>,
        f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>,
        op: Op<S>,
    ) -> Result<Self> {
        self.same_tape(other)?;
        let v = f(&self.value(), &other.value())?;
        Ok(self.tape.push(Arc::new(v), op))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a.add(b), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a.sub(b), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a.mul(b), Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: S) -> Result<Self> {
        self.unary(|a| a.scale(c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: S) -> Result<Self> {
        self.unary(|a| a.add_scalar(c), Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn conv2d(&self, w: &Var<'t, S>, bias: Option<&Var<'t, S>>, stride: usize, pad: usize) -> Result<Self> {
        self.same_tape(w)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        let bias_val = bias.map(|b| b.value());
        let v = self
            .value()
            .conv2d(&w.value(), bias_val.as_deref(), stride, pad)?;
        Ok(self.tape.push(
            Arc::new(v),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
        ))
    }

    pub fn add_bias(&self, bias: &Var<'t, S>) -> Result<Self> {
        self.binary(bias, |a, b| a.add_bias(b), Op::AddBias(self.id, bias.id))
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary(|a| a.relu(), Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary(|a| a.tanh(), Op::Tanh(self.id))
    }

    pub fn global_avg_pool(&self) -> Result<Self> {
        self.unary(|a| a.global_avg_pool(), Op::GlobalAvgPool(self.id))
    }

    pub fn mean(&self) -> Result<Self> {
        self.unary(|a| a.mean(), Op::Mean(self.id))
    }

    pub fn sum(&self) -> Result<Self> {
        self.unary(|a| a.sum(), Op::Sum(self.id))
    }

    pub fn l2_normalize(&self) -> Result<Self> {
        self.unary(|a| a.l2_normalize(), Op::L2Normalize(self.id))
    }

    /// Scalar cosine similarity, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(
            other,
            |a, b| Tensor::scalar(a.cosine(b)?),
            Op::Cosine(self.id, other.id),
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        self.unary(|a| a.upsample_nearest(factor), Op::Upsample(self.id, factor))
    }

    pub fn concat_channels(&self, other: &Var<'t, S>) -> Result<Self> {
        self.binary(other, |a, b| a.concat_channels(b), Op::Concat(self.id, other.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        self.unary(|a| a.reshape(shape), Op::Reshape(self.id))
    }

    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        self.unary(
            |a| a.cross_entropy(labels),
            Op::CrossEntropy(self.id, labels.to_vec()),
        )
    }

    /// `x W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: &Var<'t, S>, b: &Var<'t, S>) -> Result<Self> {
        self.matmul(w)?.add_bias(b)
    }
}

/// Central-difference gradient of `f` at `x`, using the five-point stencil
/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h` per coordinate.
pub fn numeric_gradient<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> Result<f64>,
    x: &Tensor<S>,
    h: f64,
) -> Result<Tensor<f64>> {
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        let mut eval = |delta: f64| -> Result<f64> {
            probe[i] = S::of(orig.f64() + delta);
            let v = f(&Tensor::new(x.shape().to_vec(), probe.clone())?);
            probe[i] = orig;
            v
        };
        let (p1, m1) = (eval(h)?, eval(-h)?);
        let (p2, m2) = (eval(2.0 * h)?, eval(-2.0 * h)?);
        grad.push((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn max_relative_error<S: Scalar, T: Scalar>(analytic: &Tensor<S>, numeric: &Tensor<T>) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return shape_err(
            "max_relative_error",
            format!("{:?} vs {:?}", analytic.shape(), numeric.shape()),
        );
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a.f64() - n.f64()).abs() / (n.f64().abs() + 1e-8))
        .fold(0.0, f64::max))
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error over coordinates.
pub fn finite_diff_check<S: Scalar>(
    f: impl for<'t> Fn(&'t Tape<S>, Var<'t, S>) -> Result<Var<'t, S>>,
    x: &Tensor<S>,
    h: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&tape, leaf)?;
    let analytic = tape.backward(root, &[leaf])?.remove(0);
    let numeric = numeric_gradient(
        |p| {
            let tape = Tape::new();
            let leaf = tape.leaf(p.clone());
            Ok(f(&tape, leaf)?.value().item()?.f64())
        },
        x,
        h,
    )?;
    max_relative_error(&analytic, &numeric)
}
