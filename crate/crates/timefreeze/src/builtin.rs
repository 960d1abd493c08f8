//! Ready-made dynamics used by the test suite and the CLI examples.

use crate::diffkit::Scalar;
use crate::model::CLSDynamics;

/// Unit point mass in the vertical plane above flat ground.
///
/// State q = (horizontal, height), controls u = (horizontal force,
/// vertical force), gravity g pulling down, gap = height. The tangent at
/// the contact is the horizontal axis.
#[derive(Clone, Debug)]
pub struct PointMass2D {
    pub g: f64,
}

impl CLSDynamics for PointMass2D {
    fn n_q(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        2
    }
    fn f_v<S: Scalar>(&self, _q: &[S], _v: &[S], u: &[S]) -> Vec<S> {
        vec![u[0].clone(), u[1].clone() - S::constant(self.g)]
    }
    fn mass<S: Scalar>(&self, _q: &[S]) -> Vec<S> {
        vec![S::one(), S::zero(), S::zero(), S::one()]
    }
    fn gap<S: Scalar>(&self, q: &[S]) -> S {
        q[1].clone()
    }
    fn tangents<S: Scalar>(&self, _q: &[S]) -> Vec<Vec<S>> {
        vec![vec![S::one(), S::zero()]]
    }
}

/// Unit point mass in 3D above flat ground; gap = q_3, two tangent
/// directions spanning the ground plane.
#[derive(Clone, Debug)]
pub struct PointMass3D {
    pub g: f64,
}

impl CLSDynamics for PointMass3D {
    fn n_q(&self) -> usize {
        3
    }
    fn n_u(&self) -> usize {
        3
    }
    fn f_v<S: Scalar>(&self, _q: &[S], _v: &[S], u: &[S]) -> Vec<S> {
        vec![
            u[0].clone(),
            u[1].clone(),
            u[2].clone() - S::constant(self.g),
        ]
    }
    fn mass<S: Scalar>(&self, _q: &[S]) -> Vec<S> {
        let mut m = vec![S::zero(); 9];
        for i in 0..3 {
            m[i * 3 + i] = S::one();
        }
        m
    }
    fn gap<S: Scalar>(&self, q: &[S]) -> S {
        q[2].clone()
    }
    fn tangents<S: Scalar>(&self, _q: &[S]) -> Vec<Vec<S>> {
        vec![
            vec![S::one(), S::zero(), S::zero()],
            vec![S::zero(), S::one(), S::zero()],
        ]
    }
}

/// Point mass above a curved surface with a mildly state-dependent,
/// non-diagonal inertia; exercises every q-dependent code path
/// (configuration-dependent normal, tangential basis, inertia solves).
#[derive(Clone, Debug)]
pub struct CurvedGap {
    pub g: f64,
}

impl Default for CurvedGap {
    fn default() -> Self {
        CurvedGap { g: 9.81 }
    }
}

impl CurvedGap {
    /// Height of the surface under horizontal position x.
    pub fn surface_height(&self, x: f64) -> f64 {
        0.1 * x.sin() + 0.3 * x * x
    }
}

impl CLSDynamics for CurvedGap {
    fn n_q(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        2
    }
    fn f_v<S: Scalar>(&self, _q: &[S], v: &[S], u: &[S]) -> Vec<S> {
        vec![
            u[0].clone() - v[0].scale(0.3),
            u[1].clone() - S::constant(self.g),
        ]
    }
    fn mass<S: Scalar>(&self, q: &[S]) -> Vec<S> {
        let off = S::constant(0.3);
        vec![
            S::constant(2.0) + q[0].cos().scale(0.1),
            off.clone(),
            off,
            S::constant(1.5),
        ]
    }
    fn gap<S: Scalar>(&self, q: &[S]) -> S {
        q[1].clone() - q[0].sin().scale(0.1) - (q[0].clone() * q[0].clone()).scale(0.3)
    }
    fn tangents<S: Scalar>(&self, q: &[S]) -> Vec<Vec<S>> {
        // Surface tangent (1, h'(x)).
        vec![vec![S::one(), q[0].cos().scale(0.1) + q[0].scale(0.6)]]
    }
}
