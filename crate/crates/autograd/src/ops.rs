//! Differentiable primitives.
//!
//! Every backward rule is itself written with these primitives, so when the
//! backward pass runs with recording enabled the gradients are tensors in the
//! graph and can be differentiated again.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array3, ArrayView2, ArrayViewMut2, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::kernels::{self, contiguous, zip_map};
use crate::tensor::{Array, Tensor};

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MulConst(Tensor, Rc<Array>),
    MatMul(Tensor, Tensor),
    BatchMatMul(Tensor, Tensor),
    Permute(Tensor, Vec<usize>),
    Reshape(Tensor),
    SumAxis(Tensor),
    SumAll(Tensor),
    BroadcastTo(Tensor),
    SumTo(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Sqrt(Tensor),
    Relu(Tensor),
    /// `order`-th derivative of the tanh-approximated GELU.
    Gelu { input: Tensor, order: u8 },
    Narrow { input: Tensor, axis: usize, start: usize },
    Pad { input: Tensor, axis: usize, start: usize },
    Concat { inputs: Vec<Tensor>, axis: usize },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | BatchMatMul(a, b) => {
                vec![a, b]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | MulConst(a, _) | Permute(a, _) | Reshape(a)
            | SumAxis(a) | SumAll(a) | BroadcastTo(a) | SumTo(a) | Exp(a) | Log(a)
            | Tanh(a) | Sigmoid(a) | Sqrt(a) | Relu(a) => vec![a],
            Narrow { input, .. } | Pad { input, .. } | Gelu { input, .. } => vec![input],
            Concat { inputs, .. } => inputs.iter().collect(),
        }
    }

    /// Gradients for each parent (aligned with [`Op::parents`]); `None` for
    /// parents that `needed` rejects.
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        g: &Tensor,
        needed: &dyn Fn(&Tensor) -> bool,
    ) -> Vec<Option<Tensor>> {
        use Op::*;
        let want = |t: &Tensor| needed(t);
        match self {
            Add(a, b) => vec![
                want(a).then(|| sum_to(g, a.shape())),
                want(b).then(|| sum_to(g, b.shape())),
            ],
            Sub(a, b) => vec![
                want(a).then(|| sum_to(g, a.shape())),
                want(b).then(|| sum_to(&neg(g), b.shape())),
            ],
            Mul(a, b) => vec![
                want(a).then(|| sum_to(&mul(g, b), a.shape())),
                want(b).then(|| sum_to(&mul(g, a), b.shape())),
            ],
            Div(a, b) => vec![
                want(a).then(|| sum_to(&div(g, b), a.shape())),
                want(b).then(|| sum_to(&neg(&div(&mul(g, out), b)), b.shape())),
            ],
            Neg(a) => vec![want(a).then(|| neg(g))],
            Scale(a, s) => vec![want(a).then(|| scale(g, *s))],
            AddScalar(a) => vec![want(a).then(|| g.clone())],
            MulConst(a, c) => vec![want(a).then(|| mul_const_rc(g, c.clone()))],
            MatMul(a, b) => vec![
                want(a).then(|| matmul(g, &transpose(b))),
                want(b).then(|| matmul(&transpose(a), g)),
            ],
            BatchMatMul(a, b) => vec![
                want(a).then(|| bmm(g, &transpose(b))),
                want(b).then(|| bmm(&transpose(a), g)),
            ],
            Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![want(a).then(|| permute(g, &inv))]
            }
            Reshape(a) => vec![want(a).then(|| reshape(g, a.shape()))],
            SumAxis(a) | SumAll(a) | SumTo(a) => {
                vec![want(a).then(|| broadcast_to(g, a.shape()))]
            }
            BroadcastTo(a) => vec![want(a).then(|| sum_to(g, a.shape()))],
            Exp(a) => vec![want(a).then(|| mul(g, out))],
            Log(a) => vec![want(a).then(|| div(g, a))],
            Tanh(a) => vec![want(a).then(|| sub(g, &mul(&mul(g, out), out)))],
            Sigmoid(a) => vec![want(a).then(|| mul(&mul(g, out), &add_scalar(&neg(out), 1.0)))],
            Sqrt(a) => vec![want(a).then(|| scale(&div(g, out), 0.5))],
            Relu(a) => {
                let mask = kernels::map(a.value(), |v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![want(a).then(|| mul_const(g, mask))]
            }
            Gelu { input, order } => vec![want(input).then(|| mul(g, &gelu_nth(input, order + 1)))],
            Narrow { input, axis, start } => {
                vec![want(input).then(|| pad(g, *axis, *start, input.shape()[*axis]))]
            }
            Pad { input, axis, start } => {
                vec![want(input).then(|| narrow(g, *axis, *start, input.shape()[*axis]))]
            }
            Concat { inputs, axis } => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let len = t.shape()[*axis];
                        let r = want(t).then(|| narrow(g, *axis, offset, len));
                        offset += len;
                        r
                    })
                    .collect()
            }
        }
    }
}

fn reduce_to(v: &Array, target: &[usize]) -> Array {
    let mut r = v.clone();
    while r.ndim() > target.len() {
        r = r.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        if t == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    r
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, op: Op) -> Tensor {
    Tensor::from_op(zip_map(a.value(), b.value(), f), op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    binary(a, b, |x, y| x + y, Op::Add(a.clone(), b.clone()))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    binary(a, b, |x, y| x - y, Op::Sub(a.clone(), b.clone()))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    binary(a, b, |x, y| x * y, Op::Mul(a.clone(), b.clone()))
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    binary(a, b, |x, y| x / y, Op::Div(a.clone(), b.clone()))
}

pub fn neg(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), |v| -v), Op::Neg(a.clone()))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(a.value() * s, Op::Scale(a.clone(), s))
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_op(a.value() + s, Op::AddScalar(a.clone()))
}

/// Elementwise product with a constant array (broadcast against `a`).
pub fn mul_const(a: &Tensor, c: Array) -> Tensor {
    mul_const_rc(a, Rc::new(c))
}

fn mul_const_rc(a: &Tensor, c: Rc<Array>) -> Tensor {
    let value = zip_map(a.value(), &c, |x, y| x * y);
    assert_eq!(value.shape(), a.shape(), "constant factor must broadcast into the tensor");
    Tensor::from_op(value, Op::MulConst(a.clone(), c))
}

fn small_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, mut c: ArrayViewMut2<f64>) {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if m * n * k <= 512 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[[i, p]] * b[[p, j]];
                }
                c[[i, j]] = acc;
            }
        }
    } else {
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
}

/// Matrix product of two 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let av = a.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
    let bv = b.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
    assert_eq!(av.dim().1, bv.dim().0, "matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape());
    Tensor::from_op(av.dot(&bv).into_dyn(), Op::MatMul(a.clone(), b.clone()))
}

/// Batched matrix product of `(b, m, k)` and `(b, k, n)` tensors.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let av = a.value().view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-d");
    let bv = b.value().view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-d");
    let (batch, m, k) = av.dim();
    let (batch2, k2, n) = bv.dim();
    assert!(batch == batch2 && k == k2, "bmm shapes {:?} x {:?}", a.shape(), b.shape());
    let mut out = Array3::<f64>::zeros((batch, m, n));
    match (av.as_slice(), bv.as_slice()) {
        (Some(x), Some(y)) if m * n * k <= 4096 => {
            kernels::small_bmm(x, y, out.as_slice_mut().unwrap(), batch, m, k, n);
        }
        _ => {
            for i in 0..batch {
                small_matmul(
                    av.index_axis(Axis(0), i),
                    bv.index_axis(Axis(0), i),
                    out.index_axis_mut(Axis(0), i),
                );
            }
        }
    }
    Tensor::from_op(out.into_dyn(), Op::BatchMatMul(a.clone(), b.clone()))
}

pub fn permute(a: &Tensor, axes: &[usize]) -> Tensor {
    let value = contiguous(a.value().view().permuted_axes(IxDyn(axes)));
    Tensor::from_op(value, Op::Permute(a.clone(), axes.to_vec()))
}

/// Swaps the last two axes.
pub fn transpose(a: &Tensor) -> Tensor {
    let n = a.ndim();
    assert!(n >= 2, "transpose needs at least 2 axes");
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    permute(a, &axes)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    if a.shape() == shape {
        return a.clone();
    }
    let value = a
        .value()
        .to_shape(IxDyn(shape))
        .unwrap_or_else(|_| panic!("cannot reshape {:?} into {:?}", a.shape(), shape))
        .into_owned();
    Tensor::from_op(value, Op::Reshape(a.clone()))
}

/// Sum along `axis`, keeping it with length 1.
pub fn sum_axis(a: &Tensor, axis: usize) -> Tensor {
    let value = a.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
    Tensor::from_op(value, Op::SumAxis(a.clone()))
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let value = Array::from_elem(IxDyn(&[]), a.value().sum());
    Tensor::from_op(value, Op::SumAll(a.clone()))
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len().max(1) as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Mean along `axis`, keeping it with length 1.
pub fn mean_axis(a: &Tensor, axis: usize) -> Tensor {
    let n = a.shape()[axis] as f64;
    scale(&sum_axis(a, axis), 1.0 / n)
}

pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Tensor {
    if a.shape() == shape {
        return a.clone();
    }
    let value = contiguous(
        a.value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape)),
    );
    Tensor::from_op(value, Op::BroadcastTo(a.clone()))
}

/// Sums broadcast axes away so the result has `shape`.
pub fn sum_to(a: &Tensor, shape: &[usize]) -> Tensor {
    if a.shape() == shape {
        return a.clone();
    }
    let value = reduce_to(a.value(), shape);
    assert_eq!(value.shape(), shape, "cannot reduce {:?} to {:?}", a.shape(), shape);
    Tensor::from_op(value, Op::SumTo(a.clone()))
}

pub fn exp(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), f64::exp), Op::Exp(a.clone()))
}

pub fn log(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), f64::ln), Op::Log(a.clone()))
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), f64::tanh), Op::Tanh(a.clone()))
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let value = kernels::map(a.value(), |v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    });
    Tensor::from_op(value, Op::Sigmoid(a.clone()))
}

pub fn sqrt(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), f64::sqrt), Op::Sqrt(a.clone()))
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor::from_op(kernels::map(a.value(), |v| v.max(0.0)), Op::Relu(a.clone()))
}

pub fn square(a: &Tensor) -> Tensor {
    mul(a, a)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const GELU_MAX_ORDER: u8 = 3;

/// Derivative of order 0..=3 of `0.5 x (1 + tanh(c (x + a x^3)))`.
pub(crate) fn gelu_scalar(x: f64, order: u8) -> f64 {
    let (c, a) = (GELU_C, GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let s = 1.0 - t * t;
    let u1 = c * (1.0 + 3.0 * a * x * x);
    let u2 = 6.0 * a * c * x;
    let u3 = 6.0 * a * c;
    match order {
        0 => 0.5 * x * (1.0 + t),
        1 => 0.5 * (1.0 + t) + 0.5 * x * s * u1,
        2 => s * u1 + 0.5 * x * (s * u2 - 2.0 * t * s * u1 * u1),
        3 => {
            let u1_3 = u1 * u1 * u1;
            1.5 * (s * u2 - 2.0 * t * s * u1 * u1)
                + 0.5 * x * (s * u3 - 6.0 * t * s * u1 * u2 - 2.0 * s * s * u1_3 + 4.0 * t * t * s * u1_3)
        }
        _ => unreachable!("gelu order checked by caller"),
    }
}

fn gelu_nth(a: &Tensor, order: u8) -> Tensor {
    assert!(
        order <= GELU_MAX_ORDER,
        "gelu derivatives beyond order {GELU_MAX_ORDER} are not implemented"
    );
    let value = kernels::map(a.value(), |v| gelu_scalar(v, order));
    Tensor::from_op(value, Op::Gelu { input: a.clone(), order })
}

/// Tanh approximation of the Gaussian error linear unit, as one node.
/// Differentiable up to third order.
pub fn gelu(a: &Tensor) -> Tensor {
    gelu_nth(a, 0)
}

/// `len` entries of `axis` starting at `start`.
pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    assert!(start + len <= a.shape()[axis], "narrow out of range");
    if start == 0 && len == a.shape()[axis] {
        return a.clone();
    }
    let value = contiguous(a.value().slice_axis(Axis(axis), Slice::from(start..start + len)));
    Tensor::from_op(value, Op::Narrow { input: a.clone(), axis, start })
}

/// Zero-pads `axis` to `full_len`, placing `a` at offset `start`.
pub fn pad(a: &Tensor, axis: usize, start: usize, full_len: usize) -> Tensor {
    let len = a.shape()[axis];
    assert!(start + len <= full_len, "pad out of range");
    if start == 0 && len == full_len {
        return a.clone();
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = full_len;
    let mut value = Array::zeros(IxDyn(&shape));
    value
        .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
        .assign(a.value());
    Tensor::from_op(value, Op::Pad { input: a.clone(), axis, start })
}

pub fn concat(inputs: &[Tensor], axis: usize) -> Tensor {
    assert!(!inputs.is_empty(), "concat of nothing");
    if inputs.len() == 1 {
        return inputs[0].clone();
    }
    let views: Vec<_> = inputs.iter().map(|t| t.value().view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat shapes agree off-axis");
    Tensor::from_op(value, Op::Concat { inputs: inputs.to_vec(), axis })
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        matmul(self, other)
    }
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        reshape(self, shape)
    }
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        permute(self, axes)
    }
    pub fn scale(&self, s: f64) -> Tensor {
        scale(self, s)
    }
    pub fn add_scalar(&self, s: f64) -> Tensor {
        add_scalar(self, s)
    }
    pub fn sum(&self) -> Tensor {
        sum_all(self)
    }
    pub fn mean(&self) -> Tensor {
        mean_all(self)
    }
    pub fn square(&self) -> Tensor {
        square(self)
    }
    pub fn tanh(&self) -> Tensor {
        tanh(self)
    }
    pub fn sigmoid(&self) -> Tensor {
        sigmoid(self)
    }
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        narrow(self, axis, start, len)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $f:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                $f(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                $f(&self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        neg(self)
    }
}
