//! Elementwise unary maps and broadcasting binary arithmetic.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel_of, Tensor};

/// How one operand is read while iterating the broadcast output.
#[derive(Clone)]
enum Access {
    Same,
    Scalar,
    Offsets(Arc<Vec<usize>>),
}

impl Access {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Access::Same => i,
            Access::Scalar => 0,
            Access::Offsets(o) => o[i],
        }
    }
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::dim(
                    op,
                    format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
                ))
            }
        };
    }
    Ok(out)
}

/// Offset into `shape` for each flat index of `out`, broadcasting size-1 axes.
fn offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let lead = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let n = numel_of(out);
    let mut result = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        result.push(off);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    result
}

fn access(shape: &[usize], out: &[usize]) -> Access {
    if shape == out {
        Access::Same
    } else if numel_of(shape) == 1 {
        Access::Scalar
    } else {
        Access::Offsets(Arc::new(offsets(shape, out)))
    }
}

fn binary<T, F, DA, DB>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: F,
    da: DA,
    db: DB,
) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(T, T) -> T,
    DA: Fn(T, T) -> T + Send + Sync + 'static,
    DB: Fn(T, T) -> T + Send + Sync + 'static,
{
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let n = numel_of(&out_shape);
    let (ad, bd) = (a.shared_data(), b.shared_data());
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let (aa, ba) = (access(a.shape(), &out_shape), access(b.shape(), &out_shape));
        (0..n).map(|i| f(ad[aa.at(i)], bd[ba.at(i)])).collect()
    };
    let (aa, ba) = (access(a.shape(), &out_shape), access(b.shape(), &out_shape));
    let (na, nb) = (a.numel(), b.numel());
    Ok(Tensor::from_op(name, data, out_shape, vec![a.clone(), b.clone()], move |g, wants| {
        let ga = wants[0].then(|| {
            let mut ga = vec![T::zero(); na];
            for (i, &gi) in g.iter().enumerate() {
                let (x, y) = (ad[aa.at(i)], bd[ba.at(i)]);
                ga[aa.at(i)] += gi * da(x, y);
            }
            ga
        });
        let gb = wants[1].then(|| {
            let mut gb = vec![T::zero(); nb];
            for (i, &gi) in g.iter().enumerate() {
                let (x, y) = (ad[aa.at(i)], bd[ba.at(i)]);
                gb[ba.at(i)] += gi * db(x, y);
            }
            gb
        });
        vec![ga, gb]
    }))
}

/// Unary map whose derivative is expressed through input `x` and output `y`.
fn unary<T, F, D>(name: &'static str, x: &Tensor<T>, f: F, df: D) -> Tensor<T>
where
    T: Real,
    F: Fn(T) -> T,
    D: Fn(T, T) -> T + Send + Sync + 'static,
{
    let xd = x.shared_data();
    let y: Arc<Vec<T>> = Arc::new(xd.iter().map(|&v| f(v)).collect());
    let yd = Arc::clone(&y);
    Tensor::from_op(name, y, x.shape().to_vec(), vec![x.clone()], move |g, _| {
        let gx = g
            .iter()
            .zip(xd.iter().zip(yd.iter()))
            .map(|(&gi, (&xv, &yv))| gi * df(xv, yv))
            .collect();
        vec![Some(gx)]
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
#[inline]
pub(crate) fn softplus_scalar<T: Real>(v: T) -> T {
    if v > T::of(30.0) {
        v
    } else if v < T::of(-30.0) {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(
            "maximum",
            self,
            other,
            |a, b| if a >= b { a } else { b },
            |a, b| if a >= b { T::one() } else { T::zero() },
            |a, b| if a >= b { T::zero() } else { T::one() },
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(
            "minimum",
            self,
            other,
            |a, b| if a <= b { a } else { b },
            |a, b| if a <= b { T::one() } else { T::zero() },
            |a, b| if a <= b { T::zero() } else { T::one() },
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        unary("neg", self, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        unary("scale", self, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        unary("add_scalar", self, move |v| v + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary("ln", self, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn sqr(&self) -> Tensor<T> {
        unary("sqr", self, |v| v * v, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary("sqrt", self, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn abs(&self) -> Tensor<T> {
        unary("abs", self, |v| v.abs(), |x, _| x.signum())
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(
            "relu",
            self,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary("tanh", self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary("sigmoid", self, sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        unary(
            "silu",
            self,
            |v| v * sigmoid_scalar(v),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor<T> {
        unary("softplus", self, softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        unary(
            "clamp",
            self,
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}
