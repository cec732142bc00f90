//! Scalar abstraction for the evaluation engine.
//!
//! Everything numerical in the forward/backward passes is generic over
//! [`Scalar`], which is implemented for `f64` (reference precision), `f32`
//! (low-precision evaluation for the smoothness contract) and [`Dual`]
//! (forward tangents riding along a reverse sweep, used for the
//! second-order force-loss gradients).

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + AddAssign
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Primal value (tangent discarded for duals, widened for `f32`).
    fn value(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn recip(self) -> Self {
        Self::one() / self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn value(self) -> f64 {
        self as f64
    }
    fn sin(self) -> Self {
        f32::sin(self)
    }
    fn cos(self) -> Self {
        f32::cos(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
}

/// First-order dual number: value plus a single forward tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dx: f64,
}

impl Dual {
    pub fn new(re: f64, dx: f64) -> Self {
        Dual { re, dx }
    }
    pub fn constant(re: f64) -> Self {
        Dual { re, dx: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.dx + o.dx)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.dx += o.dx;
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.dx - o.dx)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.dx + self.dx * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        let re = self.re * inv;
        Dual::new(re, (self.dx - re * o.dx) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.dx)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.re.cos() * self.dx)
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -self.re.sin() * self.dx)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.dx)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, 0.5 / s * self.dx)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.dx)
    }
    fn powi(self, n: i32) -> Self {
        let p = self.re.powi(n - 1);
        Dual::new(p * self.re, n as f64 * p * self.dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dual_arithmetic_matches_finite_differences() {
        let f = |x: Dual| {
            let a = x.sin() * x + Dual::constant(2.5) / x.exp();
            a.sqrt() + a.tanh() - a.powi(3)
        };
        let x0 = 0.83_f64;
        let d = f(Dual::new(x0, 1.0));
        let h = 1e-6;
        let num =
            (f(Dual::constant(x0 + h)).re - f(Dual::constant(x0 - h)).re) / (2.0 * h);
        assert_abs_diff_eq!(d.dx, num, epsilon = 1e-7);
    }
}
