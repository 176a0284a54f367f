use super::{
    broadcast_index_map, broadcast_kind, broadcast_shape, reduce_to_shape, BroadcastKind, Scalar,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    StopGradient,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize),
    Pow(usize, T),
    Exp(usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm { input: usize, inv_std: Vec<T> },
    Softmax(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    BroadcastTo(usize),
    Reshape(usize),
    Permute { input: usize, axes: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of primitive operations supporting one reverse sweep.
///
/// Every op checks its output for NaN/Inf and fails with
/// [`Error::NonFinite`] instead of propagating it.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    /// Value-identical copy of `x` through which no adjoint flows.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .map_err(|_| Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let data = broadcast_apply(va, vb, &out_shape, f);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a.0]);
        self.push(value, op, rg, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "neg", |x| -x, Op::Neg(a.0))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::cast_from(c);
        self.unary(a, "scale", |x| x * c, Op::Scale(a.0, c))
    }

    /// Addition of a constant scalar.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::cast_from(c);
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a.0))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let p = T::cast_from(p);
        self.unary(a, "pow", |x| x.powf(p), Op::Pow(a.0, p))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu(a.0))
    }

    /// `(m,k) @ (k,n)` or batched `(b,m,k) @ (b,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &vb.data()[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if va.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    /// `x @ w + b` with `w: (in, out)` and `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::cast_from(v.len() as f64);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(m), Op::MeanAll(a.0), rg, "mean")
    }

    /// Sum over `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let data = v.data();
        for o in 0..outer {
            for d in 0..dim {
                let row = &data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis(a.0), rg, "sum_axis")
    }

    /// Normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let d = *v.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        let eps = T::cast_from(eps);
        let n = T::cast_from(d as f64);
        let mut out = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.len() / d.max(1));
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|&x| (x - mean) * is));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a.0]);
        self.push(value, Op::LayerNorm { input: a.0, inv_std }, rg, "layer_norm")
    }

    /// Layer normalization followed by a per-feature affine map.
    pub fn layer_norm_affine(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(a, eps)?;
        let s = self.mul(n, gamma)?;
        self.add(s, beta)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let d = *v.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &x in row {
                let e = (x - max).exp();
                z = z + e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / z;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Softmax(a.0), rg, "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: ids, axis }, rg, "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&v.data()[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(&[a.0]);
        self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            rg,
            "slice",
        )
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let out = broadcast_shape(v.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast_to",
                format!("{:?} -> {shape:?}", v.shape()),
            ));
        }
        let zero = Tensor::zeros(Vec::<usize>::new());
        let data = broadcast_apply(v, &zero, shape, |x, _| x);
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(a.0), rg, "broadcast_to")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape.to_vec())?;
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Reshape(a.0), rg, "reshape")
    }

    /// Axis permutation; `axes[i]` is the input axis placed at output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if axes.len() != v.rank() || seen.iter().enumerate().any(|(i, &x)| i != x) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for {:?}", v.shape()),
            ));
        }
        let (shape, data) = permute_data(v.shape(), v.data(), axes);
        let rg = self.rg(&[a.0]);
        self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                input: a.0,
                axes: axes.to_vec(),
            },
            rg,
            "permute",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(g),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads: out,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |id: usize| &self.nodes[id].value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
                self.accumulate(grads, *b, reduce_to_shape(g, out_shape, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, reduce_to_shape(&neg, out_shape, val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].requires_grad {
                    let full = broadcast_apply_with(g, out_shape, vb, |gi, y| gi * y);
                    self.accumulate(grads, *a, reduce_to_shape(&full, out_shape, va.shape()));
                }
                if self.nodes[*b].requires_grad {
                    let full = broadcast_apply_with(g, out_shape, va, |gi, x| gi * x);
                    self.accumulate(grads, *b, reduce_to_shape(&full, out_shape, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].requires_grad {
                    let full = broadcast_apply_with(g, out_shape, vb, |gi, y| gi / y);
                    self.accumulate(grads, *a, reduce_to_shape(&full, out_shape, va.shape()));
                }
                if self.nodes[*b].requires_grad {
                    // d(a/b)/db = -out / b
                    let out = node.value.data();
                    let t: Vec<T> = g.iter().zip(out).map(|(&gi, &o)| -gi * o).collect();
                    let full = broadcast_apply_with(&t, out_shape, vb, |x, y| x / y);
                    self.accumulate(grads, *b, reduce_to_shape(&full, out_shape, vb.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|&x| -x).collect()),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
                if self.nodes[*a].requires_grad {
                    // dA = G @ B^T
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            (1, n as isize),
                            T::zero(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[*b].requires_grad {
                    // dB = A^T @ G
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            T::zero(),
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::MeanAll(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / T::cast_from(n as f64); n]);
            }
            Op::SumAxis(a) => {
                let expanded = expand_to(g, out_shape, val(*a).shape());
                self.accumulate(grads, *a, expanded);
            }
            Op::Pow(a, p) => {
                let x = val(*a).data();
                let pm1 = *p - T::one();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * *p * xi.powf(pm1))
                    .collect::<Vec<_>>();
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "pow backward" });
                }
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect(),
                );
            }
            Op::LayerNorm { input, inv_std } => {
                let y = node.value.data();
                let d = *out_shape.last().unwrap_or(&1);
                let n = T::cast_from(d as f64);
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &is) in g.chunks(d).zip(y.chunks(d)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| is * (gi - mg - yi * mgy)));
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *out_shape.last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let dim = val(p).shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let mut part = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + dim * inner]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += dim;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = val(*input).shape();
                let (outer, dim, inner) = split_axis(in_shape, *axis);
                let width = out_shape[*axis] * inner;
                let mut full = vec![T::zero(); val(*input).len()];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    full[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.accumulate(grads, *input, full);
            }
            Op::BroadcastTo(a) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, val(*a).shape()));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute { input, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, data) = permute_data(out_shape, g, &inverse);
                self.accumulate(grads, *input, data);
            }
        }
        Ok(())
    }
}

/// Gradients of the leaves touched by a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` is not connected to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::cast_from(GELU_C);
    let k = T::cast_from(GELU_K);
    let half = T::cast_from(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::cast_from(GELU_C);
    let k = T::cast_from(GELU_K);
    let half = T::cast_from(0.5);
    let three = T::cast_from(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::shape("matmul", format!("{a:?} @ {b:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_apply<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out.iter().product();
    let (da, db) = (a.data(), b.data());
    match (broadcast_kind(a.shape(), out), broadcast_kind(b.shape(), out)) {
        (BroadcastKind::Same, BroadcastKind::Same) => {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        }
        (BroadcastKind::Same, BroadcastKind::Cycle(n)) => {
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect()
        }
        (BroadcastKind::Cycle(n), BroadcastKind::Same) => {
            db.iter().enumerate().map(|(i, &y)| f(da[i % n], y)).collect()
        }
        _ => {
            let ma = broadcast_index_map(a.shape(), out);
            let mb = broadcast_index_map(b.shape(), out);
            (0..total).map(|i| f(da[ma[i]], db[mb[i]])).collect()
        }
    }
}

/// Apply `f(g_i, other_i)` where `g` is laid out over `out` and `other`
/// broadcasts to `out`.
fn broadcast_apply_with<T: Scalar>(
    g: &[T],
    out: &[usize],
    other: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let d = other.data();
    match broadcast_kind(other.shape(), out) {
        BroadcastKind::Same => g.iter().zip(d).map(|(&x, &y)| f(x, y)).collect(),
        BroadcastKind::Cycle(n) => g.iter().enumerate().map(|(i, &x)| f(x, d[i % n])).collect(),
        BroadcastKind::General => {
            let m = broadcast_index_map(other.shape(), out);
            g.iter().zip(&m).map(|(&x, &j)| f(x, d[j])).collect()
        }
    }
}

/// Broadcast `g` (shaped `small`) up to `big`.
fn expand_to<T: Scalar>(g: &[T], small: &[usize], big: &[usize]) -> Vec<T> {
    let map = broadcast_index_map(small, big);
    map.into_iter().map(|j| g[j]).collect()
}

fn permute_data<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            src += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    (out_shape, out)
}
