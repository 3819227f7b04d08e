//! Elementwise operators.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

use super::graph::{Backward, Graph, Var};
use super::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Unary {
    fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Gelu => gelu(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
        }
    }

    fn deriv<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Gelu => gelu_grad(x),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
        }
    }
}

struct UnaryOp(Unary);

impl<T: Scalar> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.0.deriv(x, y))
            .collect();
        vec![Some(Tensor4::from_vec(x.shape(), data).expect("same shape"))]
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(Binary);

impl<T: Scalar> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        match self.0 {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Binary::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let da = b.data().iter().zip(grad.data()).map(|(&b, &g)| b * g).collect();
                let db = a.data().iter().zip(grad.data()).map(|(&a, &g)| a * g).collect();
                vec![
                    Some(Tensor4::from_vec(a.shape(), da).expect("same shape")),
                    Some(Tensor4::from_vec(b.shape(), db).expect("same shape")),
                ]
            }
        }
    }
}

struct AffineOp<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for AffineOp<T> {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let s = self.scale;
        vec![Some(grad.map(|g| g * s))]
    }
}

/// Clamp with a projected gradient: at a bound, the cotangent only passes
/// when a descent step would move the value back inside the interval.
struct ClampOp<T> {
    lo: T,
    hi: T,
}

impl<T: Scalar> Backward<T> for ClampOp<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _output: &Tensor4<T>,
        grad: &Tensor4<T>,
    ) -> Vec<Option<Tensor4<T>>> {
        let x = inputs[0];
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| clamp_grad(x, g, self.lo, self.hi))
            .collect();
        vec![Some(Tensor4::from_vec(x.shape(), data).expect("same shape"))]
    }
}

#[inline]
pub(crate) fn clamp_grad<T: Scalar>(x: T, g: T, lo: T, hi: T) -> T {
    if x > lo && x < hi {
        g
    } else if x == lo && g < T::zero() {
        // descent step x - lr*g moves up, back into the interval
        g
    } else if x == hi && g > T::zero() {
        g
    } else {
        T::zero()
    }
}

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let out = self.value(x).map(|v| u.eval(v));
        self.record(&[x], out, UnaryOp(u))
    }

    /// Smooth GELU (tanh form).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("elementwise op on {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let out = Tensor4::from_vec(ta.shape(), data)?;
        Ok(self.record(&[a, b], out, BinaryOp(op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| v * scale + shift);
        self.record(&[x], out, AffineOp { scale })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.record(&[x], out, ClampOp { lo, hi })
    }

    /// Same value, cut from the gradient path.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }
}
