use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{self, Var};

/// Scalar arithmetic shared by plain `f64` and taped [`Var`]s, so dynamics and
/// collision code is written once and evaluated either way.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn softplus(self, k: f64) -> Self;
}

impl Real for f64 {
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn softplus(self, k: f64) -> Self {
        tape::softplus(self, k)
    }
}

impl Real for Var<'_> {
    fn lift(&self, c: f64) -> Self {
        self.constant(c)
    }
    fn value(&self) -> f64 {
        self.val()
    }
    fn sin(self) -> Self {
        Var::sin(self)
    }
    fn cos(self) -> Self {
        Var::cos(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn max(self, other: Self) -> Self {
        self.maximum(other)
    }
    fn min(self, other: Self) -> Self {
        self.minimum(other)
    }
    fn softplus(self, k: f64) -> Self {
        Var::softplus(self, k)
    }
}

/// Smallest of a non-empty slice.
pub fn min_all<R: Real>(xs: &[R]) -> R {
    let mut m = xs[0];
    for &x in &xs[1..] {
        m = m.min(x);
    }
    m
}

pub fn max_all<R: Real>(xs: &[R]) -> R {
    let mut m = xs[0];
    for &x in &xs[1..] {
        m = m.max(x);
    }
    m
}
