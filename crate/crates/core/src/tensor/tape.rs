use super::kernels::{self, col2im, im2col, matmul_raw, ConvGeometry, Padding};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
        cols: Option<Vec<S>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Relu(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records forward ops in execution order so [`Tape::backward`] can replay
/// them in reverse. Confined to one thread; create one per forward pass.
#[derive(Debug)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    /// First op that produced NaN/Inf; only tracked in debug builds.
    non_finite: Option<&'static str>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
        name: &'static str,
    ) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(name);
        }
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

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, "matmul"))
    }

    /// 3×3 cross-correlation over NHWC input with a `[3,3,c,co]` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(x).shape(),
            self.value(k).shape(),
            stride,
            padding,
        )?;
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![S::zero(); geom.out_positions() * geom.out_channels];
        matmul_raw(
            &cols,
            self.value(k).data(),
            &mut out,
            geom.out_positions(),
            geom.patch_len(),
            geom.out_channels,
        );
        let out = Tensor::new(geom.out_shape(), out)?;
        let rg = self.rg(x) || self.rg(k);
        let cols = self.rg(k).then_some(cols);
        Ok(self.push(out, Op::Conv2d { x, k, geom, cols }, rg, "conv2d"))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same_shape(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same_shape(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_same_shape(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg, "mul"))
    }

    /// `x + bias` with `bias` repeated along every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vb.len();
        if vb.rank() != 1 || vx.shape().last() != Some(&c) {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        if c > 0 {
            for chunk in out.data_mut().chunks_mut(c) {
                for (o, &b) in chunk.iter_mut().zip(vb.data()) {
                    *o = *o + b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg, "add_bias"))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg, "relu")
    }

    /// `[b,h,w,c] -> [b,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "global_avg_pool expects rank 4, got {:?}",
                v.shape()
            )));
        }
        let (b, h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let inv = S::one() / S::from_usize(h * w).unwrap_or_else(S::one).max(S::one());
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for pix in v.data()[bi * h * w * c..(bi + 1) * h * w * c].chunks(c) {
                for (o, &p) in acc.iter_mut().zip(pix) {
                    *o = *o + p;
                }
            }
            acc.iter_mut().for_each(|o| *o = *o * inv);
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg, "global_avg_pool"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg, "reshape"))
    }

    /// `[b, d1, d2, ...] -> [b, d1·d2·…]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.is_empty() {
            return Err(Error::InvalidArgument("flatten of a scalar".into()));
        }
        let rest: usize = shape[1..].iter().product();
        let target = [shape[0], rest];
        self.reshape(x, &target)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::InvalidArgument(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = v.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut m = S::neg_infinity();
                for j in 0..n {
                    m = m.max(d[at(j)]);
                }
                let mut z = S::zero();
                for j in 0..n {
                    z = z + (d[at(j)] - m).exp();
                }
                let lse = m + z.ln();
                for j in 0..n {
                    d[at(j)] = d[at(j)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg, "log_softmax"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    /// Mean over all elements (0 for an empty tensor).
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len().max(1);
        let out = Tensor::scalar(v.sum_all() / S::from_usize(n).unwrap());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg, "mean")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    /// Name of the first op whose output was not finite (debug builds only;
    /// always `None` in release).
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    /// Fails with [`Error::NonFinite`] in debug builds if any recorded value
    /// was NaN/Inf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if let Some(op) = self.non_finite {
            return Err(Error::NonFinite(op));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        op: &Op<S>,
        out: &Tensor<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor<S>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.matmul(&vb.transpose2()?)?);
                }
                if self.rg(*b) {
                    acc(*b, va.transpose2()?.matmul(g)?);
                }
            }
            Op::Conv2d { x, k, geom, cols } => {
                let (p, pl, co) = (geom.out_positions(), geom.patch_len(), geom.out_channels);
                if let Some(cols) = cols {
                    let cols_t = kernels::transpose(cols, p, pl);
                    let mut dk = vec![S::zero(); pl * co];
                    matmul_raw(&cols_t, g.data(), &mut dk, pl, p, co);
                    acc(*k, Tensor::new(self.value(*k).shape().to_vec(), dk)?);
                }
                if self.rg(*x) {
                    let k_t = kernels::transpose(self.value(*k).data(), pl, co);
                    let mut dcols = vec![S::zero(); p * pl];
                    matmul_raw(g.data(), &k_t, &mut dcols, p, co, pl);
                    let dx = col2im(&dcols, geom);
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, zip_map(g, vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, zip_map(g, va, |x, y| x * y));
                }
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![S::zero(); c];
                    if c > 0 {
                        for chunk in g.data().chunks(c) {
                            for (d, &v) in db.iter_mut().zip(chunk) {
                                *d = *d + v;
                            }
                        }
                    }
                    acc(*bias, Tensor::new(vec![c], db)?);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::Relu(a) => acc(
                *a,
                zip_map(g, out, |d, y| if y > S::zero() { d } else { S::zero() }),
            ),
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                let inv = S::one() / S::from_usize((h * w).max(1)).unwrap();
                let mut dx = vec![S::zero(); b * h * w * c];
                for bi in 0..b {
                    let gr = &g.data()[bi * c..(bi + 1) * c];
                    for pix in dx[bi * h * w * c..(bi + 1) * h * w * c].chunks_mut(c) {
                        for (d, &gv) in pix.iter_mut().zip(gr) {
                            *d = gv * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(shape, dx)?);
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?),
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let mut dx = g.clone();
                let (d, y) = (dx.data_mut(), out.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut total = S::zero();
                        for j in 0..n {
                            total = total + g.data()[at(j)];
                        }
                        for j in 0..n {
                            d[at(j)] = g.data()[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let gv = g.data()[0] / S::from_usize(v.len().max(1)).unwrap();
                acc(*x, Tensor::full(v.shape(), gv));
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("zip_map operands share a shape")
}

/// Result of [`Tape::backward`]: one gradient slot per recorded value.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, if it was reached from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
