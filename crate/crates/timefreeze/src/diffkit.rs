//! Forward-mode automatic differentiation on dual numbers.
//!
//! Every gradient and Jacobian in this crate is computed here, so that
//! quantities derived from the same user callable (constraint normals,
//! contact accelerations, region tests) are always mutually consistent.
//! Duals nest: `Dual<Dual<f64>>` gives the second derivatives needed for
//! the gap-acceleration terms.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("singular linear system (pivot {pivot:.3e} at column {col})")]
    SingularMatrix { pivot: f64, col: usize },
}

/// Scalar type over which model callables and residuals are evaluated.
///
/// Implemented by `f64` and by `Dual<T>` for any scalar `T`, which is what
/// lets the same model code produce values, first and second derivatives.
///
/// Nonsmooth primitives pick a fixed one-sided derivative:
/// `max0` (i.e. `max(0, x)`) has derivative 0 at `x = 0`, `abs` has
/// derivative +1 at 0. Integrators isolate kinks by switch detection, so
/// these conventions are never load-bearing on a trajectory.
pub trait Scalar:
    Clone
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(x: f64) -> Self;
    /// Leading (derivative-free) value, recursively through nested duals.
    fn val(&self) -> f64;
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn one() -> Self {
        Self::constant(1.0)
    }
    /// Multiply by an f64 constant.
    fn scale(&self, s: f64) -> Self;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, n: i32) -> Self;
    /// |x|, derivative +1 at x = 0.
    fn abs(&self) -> Self;
    /// max(0, x), derivative 0 at x = 0.
    fn max0(&self) -> Self;
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }
    fn val(&self) -> f64 {
        *self
    }
    fn scale(&self, s: f64) -> Self {
        self * s
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn max0(&self) -> Self {
        if *self > 0.0 {
            *self
        } else {
            0.0
        }
    }
}

/// Dual number carrying `k` simultaneous tangent directions.
///
/// A constant is represented with an empty tangent vector; arithmetic
/// broadcasts it against any tangent width.
#[derive(Clone, Debug)]
pub struct Dual<T> {
    pub re: T,
    pub eps: Vec<T>,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: Vec<T>) -> Self {
        Dual { re, eps }
    }

    /// Seed variable `i` of `k` with unit tangent.
    pub fn seeded(re: T, i: usize, k: usize) -> Self {
        let mut eps = vec![T::zero(); k];
        eps[i] = T::one();
        Dual { re, eps }
    }

    /// Lift a value to a dual constant (zero derivative).
    pub fn lift(re: T) -> Self {
        Dual { re, eps: Vec::new() }
    }

    fn zip_eps(a: &[T], b: &[T], f: impl Fn(&T, &T) -> T) -> Vec<T> {
        match (a.len(), b.len()) {
            (0, 0) => Vec::new(),
            (_, 0) => a.iter().map(|x| f(x, &T::zero())).collect(),
            (0, _) => b.iter().map(|x| f(&T::zero(), x)).collect(),
            (n, m) => {
                assert_eq!(n, m, "mismatched tangent widths {n} vs {m}");
                a.iter().zip(b.iter()).map(|(x, y)| f(x, y)).collect()
            }
        }
    }

    fn map_eps(&self, f: impl Fn(&T) -> T) -> Vec<T> {
        self.eps.iter().map(f).collect()
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual {
            re: self.re.clone() + rhs.re.clone(),
            eps: Self::zip_eps(&self.eps, &rhs.eps, |a, b| a.clone() + b.clone()),
        }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual {
            re: self.re.clone() - rhs.re.clone(),
            eps: Self::zip_eps(&self.eps, &rhs.eps, |a, b| a.clone() - b.clone()),
        }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual {
            re: self.re.clone() * rhs.re.clone(),
            eps: Self::zip_eps(&self.eps, &rhs.eps, |a, b| {
                a.clone() * rhs.re.clone() + b.clone() * self.re.clone()
            }),
        }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.re.clone();
        let re = self.re.clone() * inv.clone();
        // (a/b)' = (a' - (a/b) b') / b
        let eps = Self::zip_eps(&self.eps, &rhs.eps, |a, b| {
            (a.clone() - re.clone() * b.clone()) * inv.clone()
        });
        Dual { re, eps }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual {
            re: -self.re.clone(),
            eps: self.map_eps(|a| -a.clone()),
        }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn constant(x: f64) -> Self {
        Dual::lift(T::constant(x))
    }
    fn val(&self) -> f64 {
        self.re.val()
    }
    fn scale(&self, s: f64) -> Self {
        Dual {
            re: self.re.scale(s),
            eps: self.map_eps(|a| a.scale(s)),
        }
    }
    fn sin(&self) -> Self {
        let d = self.re.cos();
        Dual {
            re: self.re.sin(),
            eps: self.map_eps(|a| a.clone() * d.clone()),
        }
    }
    fn cos(&self) -> Self {
        let d = -self.re.sin();
        Dual {
            re: self.re.cos(),
            eps: self.map_eps(|a| a.clone() * d.clone()),
        }
    }
    fn exp(&self) -> Self {
        let e = self.re.exp();
        Dual {
            re: e.clone(),
            eps: self.map_eps(|a| a.clone() * e.clone()),
        }
    }
    fn ln(&self) -> Self {
        let d = T::one() / self.re.clone();
        Dual {
            re: self.re.ln(),
            eps: self.map_eps(|a| a.clone() * d.clone()),
        }
    }
    fn sqrt(&self) -> Self {
        let r = self.re.sqrt();
        let d = T::constant(0.5) / r.clone();
        Dual {
            re: r,
            eps: self.map_eps(|a| a.clone() * d.clone()),
        }
    }
    fn powi(&self, n: i32) -> Self {
        let d = self.re.powi(n - 1).scale(n as f64);
        Dual {
            re: self.re.powi(n),
            eps: self.map_eps(|a| a.clone() * d.clone()),
        }
    }
    fn abs(&self) -> Self {
        if self.re.val() < 0.0 {
            -self.clone()
        } else {
            self.clone()
        }
    }
    fn max0(&self) -> Self {
        if self.re.val() > 0.0 {
            self.clone()
        } else {
            Self::zero()
        }
    }
}

/// max(a, b) by value comparison; ties pick `a`.
pub fn max<S: Scalar>(a: S, b: S) -> S {
    if a.val() >= b.val() {
        a
    } else {
        b
    }
}

/// Euclidean norm of a slice, smooth away from 0.
pub fn norm2<S: Scalar>(xs: &[S]) -> S {
    let mut acc = S::zero();
    for x in xs {
        acc = acc + x.clone() * x.clone();
    }
    acc.sqrt()
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + x.clone() * y.clone();
    }
    acc
}

/// Gradient of a scalar function at `x`, base scalar `B`.
pub fn gradient<B, F>(f: F, x: &[B]) -> Vec<B>
where
    B: Scalar,
    F: FnOnce(&[Dual<B>]) -> Dual<B>,
{
    let k = x.len();
    let seeds: Vec<Dual<B>> = x
        .iter()
        .enumerate()
        .map(|(i, xi)| Dual::seeded(xi.clone(), i, k))
        .collect();
    let mut y = f(&seeds);
    y.eps.resize(k, B::zero());
    y.eps
}

/// Jacobian (rows = outputs) of a vector function at `x`.
pub fn jacobian<B, F>(f: F, x: &[B]) -> Vec<Vec<B>>
where
    B: Scalar,
    F: FnOnce(&[Dual<B>]) -> Vec<Dual<B>>,
{
    let k = x.len();
    let seeds: Vec<Dual<B>> = x
        .iter()
        .enumerate()
        .map(|(i, xi)| Dual::seeded(xi.clone(), i, k))
        .collect();
    f(&seeds)
        .into_iter()
        .map(|mut yi| {
            yi.eps.resize(k, B::zero());
            yi.eps
        })
        .collect()
}

/// Solve the dense n-by-n system `a x = b` in place (row-major `a`),
/// with partial pivoting on leading values. Works for any scalar, which
/// is how inertia-matrix solves stay differentiable.
pub fn solve_dense<S: Scalar>(a: &mut [S], b: &mut [S], n: usize) -> Result<(), DiffError> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].val().abs();
        for r in col + 1..n {
            let v = a[r * n + col].val().abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(DiffError::SingularMatrix { pivot: best, col });
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let inv = S::one() / a[col * n + col].clone();
        for r in col + 1..n {
            let factor = a[r * n + col].clone() * inv.clone();
            for c in col..n {
                a[r * n + c] = a[r * n + c].clone() - factor.clone() * a[col * n + c].clone();
            }
            b[r] = b[r].clone() - factor * b[col].clone();
        }
    }
    for r in (0..n).rev() {
        let mut acc = b[r].clone();
        for c in r + 1..n {
            acc = acc - a[r * n + c].clone() * b[c].clone();
        }
        b[r] = acc / a[r * n + r].clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_coordinate() {
        let g = gradient(|q: &[Dual<f64>]| q[1].clone(), &[3.0, -2.0]);
        assert_eq!(g, vec![0.0, 1.0]);
    }

    #[test]
    fn jacobian_of_identity() {
        let j = jacobian(|x: &[Dual<f64>]| x.to_vec(), &[1.0, 2.0, 3.0]);
        for (i, row) in j.iter().enumerate() {
            for (jj, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == jj { 1.0 } else { 0.0 });
            }
        }
    }

    fn poly(x: &[f64]) -> f64 {
        x[0].powi(3) * x[1] - 2.0 * x[1] * x[2] + x[2].powi(2) * x[0] + (x[0] * x[1]).sin()
            + (1.0 + x[2] * x[2]).ln()
    }

    fn poly_s<S: Scalar>(x: &[S]) -> S {
        x[0].powi(3) * x[1].clone() - x[1].clone().scale(2.0) * x[2].clone()
            + x[2].powi(2) * x[0].clone()
            + (x[0].clone() * x[1].clone()).sin()
            + (S::one() + x[2].clone() * x[2].clone()).ln()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let x = [0.7, -1.3, 0.4];
        let g = gradient(|xs: &[Dual<f64>]| poly_s(xs), &x);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (poly(&xp) - poly(&xm)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(1.0);
            assert!(rel < 1e-7, "component {i}: ad {} vs fd {}", g[i], fd);
        }
    }

    #[test]
    fn nested_duals_give_second_derivatives() {
        // f(x) = sin(x); f''(x) = -sin(x)
        let x = 0.9_f64;
        let inner = Dual::<f64>::seeded(x, 0, 1);
        let outer = Dual::<Dual<f64>>::seeded(inner, 0, 1);
        let y = outer.sin();
        let second = y.eps[0].eps[0];
        assert!((second + x.sin()).abs() < 1e-14);
    }

    #[test]
    fn max0_convention_at_zero() {
        let x = Dual::<f64>::seeded(0.0, 0, 1);
        let y = x.max0();
        assert_eq!(y.val(), 0.0);
        assert!(y.eps.is_empty() || y.eps[0] == 0.0);
    }

    #[test]
    fn solve_dense_roundtrip() {
        let a0 = [4.0, 1.0, 0.5, 1.0, 3.0, -0.2, 0.5, -0.2, 2.0];
        let xs = [1.0, -2.0, 0.5];
        let mut b = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                b[r] += a0[r * 3 + c] * xs[c];
            }
        }
        let mut a = a0.to_vec();
        solve_dense(&mut a, &mut b, 3).unwrap();
        for i in 0..3 {
            assert!((b[i] - xs[i]).abs() < 1e-12);
        }
    }
}
