//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] is built eagerly: every method computes its value immediately
//! and records how it was produced. [`Graph::backward`] then walks the record
//! in reverse. A graph is confined to one thread.

use super::conv::{
    conv3d, conv3d_grad_input, conv3d_grad_weight, conv3d_transposed,
    conv3d_transposed_grad_weight, softmax_lastdim, sum_pool_depth, sum_pool_depth_adjoint,
    ConvGeometry,
};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    LogFloor(Var, T),
    XLogX(Var),
    Abs(Var),
    Silu(Var),
    Gelu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Matmul(Var, Var),
    BatchedMatmul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    AddRow(Var, Var),
    AddChannelBias(Var, Var),
    Conv3d(Var, Var, ConvGeometry),
    Conv3dTransposed(Var, Var, ConvGeometry),
    SumPoolDepth(Var, usize),
    Rotate {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    SelectRows(Var, Vec<usize>),
    Opaque(&'static str, Vec<Var>),
}

pub struct Graph<T: Real = f64> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::from_f64(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// A differentiable leaf (model parameter or input under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Record a value computed outside the graph from `inputs`. Backward
    /// through it fails with a capability error.
    pub fn opaque(&mut self, name: &'static str, inputs: &[Var], value: Tensor<T>) -> Var {
        let t = self.tracked_any(inputs);
        self.push(value, Op::Opaque(name, inputs.to_vec()), t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.values[a.0].zip_map(&self.values[b.0], f)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(v, op, t))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.values[a.0].map(f);
        let t = self.tracked[a.0];
        self.push(v, op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_floored(a, T::zero())
    }

    /// `ln(max(x, floor))`.
    pub fn log_floored(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::LogFloor(a, floor))
    }

    /// `x ln x` with the convention `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x * x.ln() } else { T::zero() },
            Op::XLogX(a),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.values[a.0].sum());
        let t = self.tracked[a.0];
        self.push(v, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.values[a.0].len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.values[a.0];
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("sum_axis {axis} on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let src = x.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let v = Tensor::new(new_shape, out)?;
        let t = self.tracked[a.0];
        Ok(self.push(v, Op::SumAxis(a, axis), t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.values[a.0].reshape(shape)?;
        let t = self.tracked[a.0];
        Ok(self.push(v, Op::Reshape(a), t))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.values[a.0].permute(axes)?;
        let t = self.tracked[a.0];
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), t))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        let (bn, m, k, n) = match (x.shape(), y.shape()) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            (s1, s2) => return Err(dim_err(format!("batched_matmul {s1:?} x {s2:?}"))),
        };
        let mut out = vec![T::zero(); bn * m * n];
        for i in 0..bn {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &x.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &y.data()[i * k * n..(i + 1) * k * n],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let v = Tensor::new(vec![bn, m, n], out)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(v, Op::BatchedMatmul(a, b), t))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_lastdim(&self.values[a.0]);
        let t = self.tracked[a.0];
        self.push(v, Op::Softmax(a), t)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = &self.values[x.0];
        let n = *xv.shape().last().unwrap_or(&0);
        if self.values[gamma.0].shape() != [n] || self.values[beta.0].shape() != [n] {
            return Err(dim_err(format!("layer_norm affine params must be [{n}]")));
        }
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let t = self.tracked_any(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            t,
        ))
    }

    /// Broadcast-add a `[n]` row to every row of `[.., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.values[x.0].shape().last().unwrap_or(&0);
        if self.values[row.0].shape() != [n] {
            return Err(dim_err(format!(
                "add_row: row {:?} vs last axis {n}",
                self.values[row.0].shape()
            )));
        }
        let r = self.values[row.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        let t = self.tracked_any(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), t))
    }

    /// Add a per-channel bias `[C]` to `[C,D,H,W]` or `[N,C,D,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.values[x.0].shape())?;
        if self.values[bias.0].shape() != [c] {
            return Err(dim_err(format!("bias must be [{c}]")));
        }
        let b = self.values[bias.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        let d = out.data_mut();
        for s in 0..n {
            for (ci, &bv) in b.iter().enumerate() {
                let o = (s * c + ci) * inner;
                for v in &mut d[o..o + inner] {
                    *v = *v + bv;
                }
            }
        }
        let t = self.tracked_any(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias(x, bias), t))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let v = conv3d(&self.values[x.0], &self.values[w.0], &geom)?;
        let t = self.tracked_any(&[x, w]);
        Ok(self.push(v, Op::Conv3d(x, w, geom), t))
    }

    pub fn conv3d_transposed(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let v = conv3d_transposed(&self.values[x.0], &self.values[w.0], &geom)?;
        let t = self.tracked_any(&[x, w]);
        Ok(self.push(v, Op::Conv3dTransposed(x, w, geom), t))
    }

    pub fn sum_pool_depth(&mut self, w: Var, window: usize) -> Result<Var> {
        if window == 1 {
            return Ok(w);
        }
        let v = sum_pool_depth(&self.values[w.0], window)?;
        let t = self.tracked[w.0];
        Ok(self.push(v, Op::SumPoolDepth(w, window), t))
    }

    /// Rotate consecutive pairs `(x[2j], x[2j+1])` of every row by fixed
    /// angles. `cos`/`sin` hold one entry per (row, pair) and are repeated
    /// over any leading axes: `x` is `[.., rows, 2*pairs]`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>) -> Result<Var> {
        let xv = &self.values[x.0];
        let width = *xv.shape().last().unwrap_or(&0);
        let table = cos.len();
        if !width.is_multiple_of(2)
            || sin.len() != table
            || table == 0
            || !xv.len().is_multiple_of(table * 2)
        {
            return Err(dim_err(format!(
                "rotate_pairs: table of {table} pairs does not tile {:?}",
                xv.shape()
            )));
        }
        let out = apply_rotation(xv, &cos, &sin, false);
        let t = self.tracked[x.0];
        Ok(self.push(out, Op::Rotate { x, cos, sin }, t))
    }

    /// Replace rows of `[rows, C]` flagged in `mask` by the `[C]` vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let xv = &self.values[x.0];
        let (rows, c) = match xv.shape() {
            [r, c] => (*r, *c),
            s => return Err(dim_err(format!("replace_rows needs [rows, C], got {s:?}"))),
        };
        if mask.len() != rows || self.values[fill.0].shape() != [c] {
            return Err(dim_err("replace_rows: mask/fill size mismatch".into()));
        }
        let f = self.values[fill.0].data().to_vec();
        let mut out = xv.clone();
        for (r, chunk) in out.data_mut().chunks_mut(c).enumerate() {
            if mask[r] {
                chunk.copy_from_slice(&f);
            }
        }
        let t = self.tracked_any(&[x, fill]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            t,
        ))
    }

    /// Gather rows of `[rows, C]` in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = &self.values[x.0];
        let (n, c) = match xv.shape() {
            [n, c] => (*n, *c),
            s => return Err(dim_err(format!("select_rows needs [rows, C], got {s:?}"))),
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(dim_err(format!("select_rows index {bad} out of {n}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * c..(r + 1) * c]);
        }
        let v = Tensor::new(vec![rows.len(), c], data)?;
        let t = self.tracked[x.0];
        Ok(self.push(v, Op::SelectRows(x, rows.to_vec()), t))
    }

    /// Reverse-mode gradients of the scalar `loss` for every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.values[loss.0].len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape()));
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked[v.0] {
            return;
        }
        debug_assert_eq!(g.shape(), self.values[v.0].shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.values[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.tracked[a.0] {
                    self.accumulate(grads, *a, gout.zip_map(val(*b), |g, y| g * y)?);
                }
                if self.tracked[b.0] {
                    self.accumulate(grads, *b, gout.zip_map(val(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gout.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::Exp(a) => {
                let y = &self.values[i];
                self.accumulate(grads, *a, gout.zip_map(y, |g, y| g * y)?);
            }
            Op::LogFloor(a, floor) => {
                let f = *floor;
                let g = gout.zip_map(val(*a), |g, x| if x > f { g / x } else { T::zero() })?;
                self.accumulate(grads, *a, g);
            }
            Op::XLogX(a) => {
                let g = gout.zip_map(val(*a), |g, x| {
                    if x > T::zero() {
                        g * (x.ln() + T::one())
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = gout.zip_map(val(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let g = gout.zip_map(val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = gout.zip_map(val(*a), |g, x| g * gelu_parts(x).1)?;
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let g = gout.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g));
            }
            Op::SumAxis(a, axis) => {
                let shape = val(*a).shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let src = gout.data();
                let mut out = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        out[base..base + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, out)?);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gout.reshape(val(*a).shape())?),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (pos, &src) in axes.iter().enumerate() {
                    inv[src] = pos;
                }
                self.accumulate(grads, *a, gout.permute(&inv)?);
            }
            Op::Matmul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.tracked[a.0] {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout.data(),
                        n,
                        1,
                        y.data(),
                        1,
                        n,
                        T::zero(),
                        &mut da,
                        k,
                        1,
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.tracked[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        x.data(),
                        1,
                        k,
                        gout.data(),
                        n,
                        1,
                        T::zero(),
                        &mut db,
                        n,
                        1,
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::BatchedMatmul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (bn, m, k, n) = (x.shape()[0], x.shape()[1], x.shape()[2], y.shape()[2]);
                let g = gout.data();
                if self.tracked[a.0] {
                    let mut da = vec![T::zero(); bn * m * k];
                    for s in 0..bn {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[s * m * n..(s + 1) * m * n],
                            n,
                            1,
                            &y.data()[s * k * n..(s + 1) * k * n],
                            1,
                            n,
                            T::zero(),
                            &mut da[s * m * k..(s + 1) * m * k],
                            k,
                            1,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![bn, m, k], da)?);
                }
                if self.tracked[b.0] {
                    let mut db = vec![T::zero(); bn * k * n];
                    for s in 0..bn {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &x.data()[s * m * k..(s + 1) * m * k],
                            1,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            n,
                            1,
                            T::zero(),
                            &mut db[s * k * n..(s + 1) * k * n],
                            n,
                            1,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![bn, k, n], db)?);
                }
            }
            Op::Softmax(a) => {
                let y = &self.values[i];
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = gout.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot = drow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = val(*x);
                let n = *xv.shape().last().unwrap();
                let gm = val(*gamma).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let nf = T::from_usize(n);
                for ((xrow, grow), dxrow) in xv
                    .data()
                    .chunks(n)
                    .zip(gout.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let (mean, inv) = row_stats(xrow, *eps);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..n {
                        let xh = (xrow[j] - mean) * inv;
                        let dxh = grow[j] * gm[j];
                        dg[j] = dg[j] + grow[j] * xh;
                        db[j] = db[j] + grow[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..n {
                        let xh = (xrow[j] - mean) * inv;
                        dxrow[j] = inv * (grow[j] * gm[j] - m1 - xh * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(vec![n], dg)?);
                self.accumulate(grads, *beta, Tensor::new(vec![n], db)?);
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, gout.clone());
                if self.tracked[row.0] {
                    let n = val(*row).len();
                    let mut dr = vec![T::zero(); n];
                    for chunk in gout.data().chunks(n) {
                        for (d, &g) in dr.iter_mut().zip(chunk) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(vec![n], dr)?);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, *x, gout.clone());
                if self.tracked[bias.0] {
                    let (n, c, inner) = channel_layout(gout.shape())?;
                    let mut db = vec![T::zero(); c];
                    for s in 0..n {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let o = (s * c + ci) * inner;
                            *d = gout.data()[o..o + inner].iter().fold(*d, |acc, &g| acc + g);
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![c], db)?);
                }
            }
            Op::Conv3d(x, w, geom) => {
                if self.tracked[x.0] {
                    let s = val(*x).shape();
                    let ins = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
                    self.accumulate(grads, *x, conv3d_grad_input(gout, val(*w), geom, ins)?);
                }
                if self.tracked[w.0] {
                    self.accumulate(grads, *w, conv3d_grad_weight(val(*x), gout, geom)?);
                }
            }
            Op::Conv3dTransposed(x, w, geom) => {
                if self.tracked[x.0] {
                    self.accumulate(grads, *x, conv3d(gout, val(*w), geom)?);
                }
                if self.tracked[w.0] {
                    self.accumulate(
                        grads,
                        *w,
                        conv3d_transposed_grad_weight(val(*x), gout, geom)?,
                    );
                }
            }
            Op::SumPoolDepth(w, window) => {
                self.accumulate(grads, *w, sum_pool_depth_adjoint(gout, *window));
            }
            Op::Rotate { x, cos, sin } => {
                self.accumulate(grads, *x, apply_rotation(gout, cos, sin, true));
            }
            Op::ReplaceRows { x, fill, mask } => {
                let c = val(*fill).len();
                if self.tracked[x.0] {
                    let mut dx = gout.clone();
                    for (r, chunk) in dx.data_mut().chunks_mut(c).enumerate() {
                        if mask[r] {
                            chunk.fill(T::zero());
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.tracked[fill.0] {
                    let mut df = vec![T::zero(); c];
                    for (r, chunk) in gout.data().chunks(c).enumerate() {
                        if mask[r] {
                            for (d, &g) in df.iter_mut().zip(chunk) {
                                *d = *d + g;
                            }
                        }
                    }
                    self.accumulate(grads, *fill, Tensor::new(vec![c], df)?);
                }
            }
            Op::SelectRows(x, rows) => {
                let shape = val(*x).shape().to_vec();
                let c = shape[1];
                let mut dx = Tensor::zeros(&shape);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for (d, &g) in dst.iter_mut().zip(&gout.data()[k * c..(k + 1) * c]) {
                        *d = *d + g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Opaque(name, inputs) => {
                if self.tracked_any(inputs) {
                    return Err(Error::Capability((*name).to_string()));
                }
            }
        }
        Ok(())
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len());
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, d, h, w] => Ok((1, c, d * h * w)),
        [n, c, d, h, w] => Ok((n, c, d * h * w)),
        _ => Err(dim_err(format!(
            "expected [C,D,H,W] or [N,C,D,H,W], got {shape:?}"
        ))),
    }
}

fn apply_rotation<T: Real>(x: &Tensor<T>, cos: &[T], sin: &[T], inverse: bool) -> Tensor<T> {
    let mut out = x.clone();
    let table = cos.len();
    for (k, pair) in out.data_mut().chunks_mut(2).enumerate() {
        let j = k % table;
        let (c, s) = (cos[j], if inverse { -sin[j] } else { sin[j] });
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
    out
}
