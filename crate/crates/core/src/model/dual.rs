//! Scalars for forward-over-reverse differentiation.
//!
//! The MLP's forward and backward passes are written once, generic over
//! [`Scalar`]. Running them on `f64` gives the gradient; running them on
//! [`Dual`] with tangent `v` seeded into the parameters gives the gradient
//! together with its directional derivative along `v`, i.e. `H v`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(x: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
}

/// First-order dual number `re + du * e`, `e^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.du += o.du;
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.du - q * o.du) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.du)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.du)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.re);
        Dual::new(s, s * (1.0 - s) * self.du)
    }
    #[inline]
    fn softplus(self) -> Self {
        Dual::new(softplus_f64(self.re), sigmoid_f64(self.re) * self.du)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<F: Fn(Dual) -> Dual>(f: F, g: impl Fn(f64) -> f64, x: f64) {
        let h = 1e-6;
        let fd = (g(x + h) - g(x - h)) / (2.0 * h);
        let d = f(Dual::new(x, 1.0));
        assert!((d.re - g(x)).abs() < 1e-14);
        assert!((d.du - fd).abs() < 1e-7 * (1.0 + fd.abs()), "{} vs {fd}", d.du);
    }

    #[test]
    fn elementary_derivatives() {
        for &x in &[-3.0, -0.4, 0.0, 0.7, 5.0] {
            check(|d| d.tanh(), f64::tanh, x);
            check(|d| d.sigmoid(), sigmoid_f64, x);
            check(|d| d.softplus(), softplus_f64, x);
            check(|d| d.exp(), f64::exp, x);
            check(|d| (d * d + Dual::from_f64(1.0)).ln(), |x| (x * x + 1.0).ln(), x);
            check(|d| d / (Dual::from_f64(2.0) + d * d), |x| x / (2.0 + x * x), x);
        }
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert_eq!(softplus_f64(1000.0), 1000.0);
        assert!(softplus_f64(-1000.0) >= 0.0);
        assert!((softplus_f64(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
