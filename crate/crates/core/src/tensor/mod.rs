//! Dense row-major tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is an immutable value (shape + shared buffer). Differentiable
//! computations are recorded on a [`Graph`], which owns its nodes and is
//! consumed by a single reverse sweep in [`Graph::backward`].

mod graph;
mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{finite_diff_gradient, max_relative_error, GradCheckReport};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Highest rank accepted by broadcasting ops.
pub const MAX_BROADCAST_RANK: usize = 4;

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks, metrics).
pub trait Scalar:
    num_traits::Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a @ b + beta * c` for row/column strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn cast_from(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the callers size `a`, `b` and `c` for the given
                // extents and strides; `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); len]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; len]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast_from(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::cast_from(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Numpy-style broadcast of two shapes, limited to [`MAX_BROADCAST_RANK`].
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    if rank > MAX_BROADCAST_RANK {
        return Err(Error::shape(
            "broadcast",
            format!("rank {rank} exceeds {MAX_BROADCAST_RANK}"),
        ));
    }
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape("broadcast", format!("{a:?} vs {b:?}")));
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides for reading a tensor of `shape` as if broadcast to `out`
/// (zero stride on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How an operand maps onto a broadcast output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BroadcastKind {
    Same,
    /// Operand repeats every `len` elements (trailing-suffix broadcast).
    Cycle(usize),
    General,
}

pub(crate) fn broadcast_kind(shape: &[usize], out: &[usize]) -> BroadcastKind {
    if shape == out {
        return BroadcastKind::Same;
    }
    let len: usize = shape.iter().product();
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        BroadcastKind::Cycle(len)
    } else {
        BroadcastKind::General
    }
}

/// Maps each output linear index to the operand linear index.
pub(crate) fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(total);
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            src += strides[axis];
            if idx[axis] < out[axis] {
                break;
            }
            src -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    map
}

/// Sum `grad` (shaped `out`) down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let len: usize = shape.iter().product();
    match broadcast_kind(shape, out) {
        BroadcastKind::Same => grad.to_vec(),
        BroadcastKind::Cycle(n) => {
            let mut acc = vec![T::zero(); len];
            for chunk in grad.chunks(n) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a = *a + g;
                }
            }
            acc
        }
        BroadcastKind::General => {
            let map = broadcast_index_map(shape, out);
            let mut acc = vec![T::zero(); len];
            for (&g, &src) in grad.iter().zip(&map) {
                acc[src] = acc[src] + g;
            }
            acc
        }
    }
}
