//! Synthesis of the clock-augmented piecewise-smooth system.
//!
//! The mechanical state is extended with a clock t; the extended state is
//! y = (q, v, t). Where the gap would be violated, an auxiliary vector
//! field (clock rate 0, configuration frozen) pushes the normal velocity
//! back to zero, mimicking the impact law in finite "numerical" time.
//! On the contact surface, the convex combination of neighboring modes
//! reproduces the constrained dynamics slowed by the factor gamma.

use std::sync::Arc;

use crate::diffkit::{dot, norm2, Scalar};
use crate::error::{Error, Result};
use crate::model::{CLSDynamics, CLSModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Frictionless,
    /// One tangent direction; sign of the tangential velocity is a
    /// switching function.
    Planar,
    /// Two tangent directions; the switching function is |v_t| - eps_t.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceClass {
    Crossing,
    SlideStable,
    Leaving,
    AuxEnter,
}

#[derive(Default)]
pub struct BuildOptions {
    /// Tangential auxiliary rate; defaults to mu * a_n.
    pub a_t: Option<f64>,
    /// Configurations at which the constraint normal is checked to be
    /// nonzero before synthesis.
    pub normal_check_points: Vec<Vec<f64>>,
}

pub struct TimeFreezingSystem<D: CLSDynamics> {
    pub model: Arc<CLSModel<D>>,
    pub a_n: f64,
    pub a_t: f64,
    pub kind: SystemKind,
    pub n_y: usize,
    pub n_f: usize,
    pub n_c: usize,
    /// Sign pattern of each mode's region in terms of c, one row per
    /// sign conjunction; mode 1 is a union of two rows.
    pub region_signs: Vec<Vec<Vec<i8>>>,
}

/// Synthesize the clock-augmented system from a contact model.
pub fn build<D: CLSDynamics>(
    model: CLSModel<D>,
    a_n: f64,
    opts: BuildOptions,
) -> Result<TimeFreezingSystem<D>> {
    assert!(a_n > 0.0, "normal auxiliary rate must be positive");
    for q in &opts.normal_check_points {
        let n = model.normal(q);
        if norm2(&n) < 1e-12 {
            return Err(Error::ZeroNormal);
        }
    }
    let (kind, n_f, n_c, a_t) = match &model.friction {
        None => (SystemKind::Frictionless, 2, 2, 0.0),
        Some(fr) => {
            let kind = if fr.n_t == 1 {
                SystemKind::Planar
            } else {
                SystemKind::Spatial
            };
            (kind, 3, 3, opts.a_t.unwrap_or(fr.mu * a_n))
        }
    };
    let region_signs = if n_f == 2 {
        vec![vec![vec![1, 0], vec![-1, 1]], vec![vec![-1, -1]]]
    } else {
        vec![
            vec![vec![1, 0, 0], vec![-1, 1, 0]],
            vec![vec![-1, -1, 1]],
            vec![vec![-1, -1, -1]],
        ]
    };
    Ok(TimeFreezingSystem {
        n_y: model.n_x() + 1,
        model: Arc::new(model),
        a_n,
        a_t,
        kind,
        n_f,
        n_c,
        region_signs,
    })
}

impl<D: CLSDynamics> TimeFreezingSystem<D> {
    pub fn n_q(&self) -> usize {
        self.model.n_q()
    }

    pub fn split<'a, S>(&self, y: &'a [S]) -> (&'a [S], &'a [S], &'a S) {
        let nq = self.model.n_q();
        (&y[..nq], &y[nq..2 * nq], &y[2 * nq])
    }

    /// Switching functions c(y) = (gap, normal velocity[, tangential]).
    pub fn c<S: Scalar>(&self, y: &[S]) -> Vec<S> {
        let (q, v, _) = self.split(y);
        let n = self.model.normal(q);
        let mut out = vec![self.model.dynamics.gap(q), dot(&n, v)];
        match self.kind {
            SystemKind::Frictionless => {}
            SystemKind::Planar => {
                let b = &self.model.dynamics.tangents(q)[0];
                out.push(dot(b, v));
            }
            SystemKind::Spatial => {
                let cols = self.model.dynamics.tangents(q);
                let vt: Vec<S> = cols.iter().map(|b| dot(b, v)).collect();
                out.push(norm2(&vt) - S::constant(self.model.eps_t));
            }
        }
        out
    }

    /// Smooth mode: unconstrained dynamics with clock rate 1.
    pub fn f_smooth<S: Scalar>(&self, y: &[S], u: &[S]) -> Vec<S> {
        let (q, v, _) = self.split(y);
        let mut out = self.model.f_ode(q, v, u);
        out.push(S::one());
        out
    }

    /// Normal auxiliary field: q frozen, v' = M^{-1} n a_n, clock frozen.
    pub fn f_aux_normal<S: Scalar>(&self, y: &[S]) -> Result<Vec<S>> {
        let (q, _, _) = self.split(y);
        let nq = self.model.n_q();
        let n = self.model.normal(q);
        let mut m = self.model.dynamics.mass(q);
        let mut rhs: Vec<S> = n.iter().map(|x| x.scale(self.a_n)).collect();
        crate::diffkit::solve_dense(&mut m, &mut rhs, nq).map_err(|_| Error::SingularInertia)?;
        let mut out = vec![S::zero(); nq];
        out.extend(rhs);
        out.push(S::zero());
        Ok(out)
    }

    /// Tangential auxiliary field for the region c_3 > 0 (planar: v_t > 0;
    /// spatial: |v_t| > eps_t). The c_3 < 0 field is its negation in the
    /// planar case; spatial uses v' = M^{-1} B v_t instead.
    fn f_aux_tangential<S: Scalar>(&self, y: &[S], positive: bool) -> Result<Vec<S>> {
        let (q, v, _) = self.split(y);
        let nq = self.model.n_q();
        let cols = self.model.dynamics.tangents(q);
        let mut force = vec![S::zero(); nq];
        match self.kind {
            SystemKind::Frictionless => unreachable!("no tangential aux without friction"),
            SystemKind::Planar => {
                let s = if positive { -self.a_t } else { self.a_t };
                for (f, b) in force.iter_mut().zip(&cols[0]) {
                    *f = b.scale(s);
                }
            }
            SystemKind::Spatial => {
                let vt: Vec<S> = cols.iter().map(|b| dot(b, v)).collect();
                if positive {
                    let nrm = norm2(&vt);
                    for (j, b) in cols.iter().enumerate() {
                        let coef = (vt[j].clone() / nrm.clone()).scale(-self.a_t);
                        for (f, bi) in force.iter_mut().zip(b) {
                            *f = f.clone() + bi.clone() * coef.clone();
                        }
                    }
                } else {
                    for (j, b) in cols.iter().enumerate() {
                        for (f, bi) in force.iter_mut().zip(b) {
                            *f = f.clone() + bi.clone() * vt[j].clone();
                        }
                    }
                }
            }
        }
        let mut m = self.model.dynamics.mass(q);
        crate::diffkit::solve_dense(&mut m, &mut force, nq)
            .map_err(|_| Error::SingularInertia)?;
        let mut out = vec![S::zero(); nq];
        out.extend(force);
        out.push(S::zero());
        Ok(out)
    }

    /// Mode columns f_1..f_{n_f}. With friction, mode 2 is the auxiliary
    /// field for c_3 > 0 and mode 3 for c_3 < 0.
    pub fn modes<S: Scalar>(&self, y: &[S], u: &[S]) -> Result<Vec<Vec<S>>> {
        let mut cols = vec![self.f_smooth(y, u)];
        let aux_n = self.f_aux_normal(y)?;
        if self.kind == SystemKind::Frictionless {
            cols.push(aux_n);
        } else {
            for positive in [true, false] {
                let t = self.f_aux_tangential(y, positive)?;
                cols.push(aux_n.iter().zip(&t).map(|(a, b)| a.clone() + b.clone()).collect());
            }
        }
        Ok(cols)
    }

    /// Convex combination sum_i theta_i f_i(y, u).
    pub fn rhs<S: Scalar>(&self, y: &[S], u: &[S], theta: &[S]) -> Result<Vec<S>> {
        let cols = self.modes(y, u)?;
        let mut out = vec![S::zero(); self.n_y];
        for (th, col) in theta.iter().zip(&cols) {
            for (o, c) in out.iter_mut().zip(col) {
                *o = o.clone() + th.clone() * c.clone();
            }
        }
        Ok(out)
    }

    /// Duration of the normal auxiliary flow started at y_s:
    /// -n^T v_s / (D a_n).
    pub fn aux_jump_time(&self, y: &[f64]) -> Result<f64> {
        let (q, v, _) = self.split(y);
        let cq = self.model.contact_quantities(q, v, &vec![0.0; self.model.n_u()])?;
        if cq.f_c.abs() > 10.0 * self.model.contact_tol {
            return Err(Error::ContractError(format!(
                "auxiliary flow started off the contact surface (gap {:.3e})",
                cq.f_c
            )));
        }
        let nv = dot(&cq.n, v);
        if nv > 1e-12 {
            return Err(Error::ContractError(format!(
                "auxiliary flow needs approaching normal velocity, got {nv:.3e}"
            )));
        }
        Ok((-nv / (cq.d * self.a_n)).max(0.0))
    }

    /// Clock rate of the sliding motion: D a_n / (D a_n - phi) in (0, 1]
    /// for phi <= 0.
    pub fn gamma(&self, q: &[f64], v: &[f64], u: &[f64]) -> Result<f64> {
        let cq = self.model.contact_quantities(q, v, u)?;
        Ok(cq.d * self.a_n / (cq.d * self.a_n - cq.phi))
    }

    /// Filippov multipliers of the sliding motion on the contact surface.
    ///
    /// With friction, stick is attempted first; if the stick combination
    /// demands a negative weight the motion is dispatched to slip, with
    /// the tangential sign recovered from the infeasible weight (or taken
    /// from `hint` when the tangential velocity itself is zero).
    pub fn sliding_multipliers(
        &self,
        q: &[f64],
        v: &[f64],
        u: &[f64],
        hint: Option<f64>,
    ) -> Result<Vec<f64>> {
        let cq = self.model.contact_quantities(q, v, u)?;
        let tol = (10.0 * self.model.contact_tol).max(1e-7);
        let nv = dot(&cq.n, v);
        if cq.f_c.abs() > tol || nv.abs() > tol {
            return Err(Error::ContractError(format!(
                "not on the sliding surface (gap {:.3e}, normal velocity {:.3e})",
                cq.f_c, nv
            )));
        }
        let gamma = cq.d * self.a_n / (cq.d * self.a_n - cq.phi);
        match self.kind {
            SystemKind::Frictionless => Ok(vec![gamma, 1.0 - gamma]),
            SystemKind::Planar => {
                let vt = cq.v_t.as_ref().unwrap()[0];
                if vt.abs() > 1e-9 {
                    Ok(Self::slip_theta(gamma, vt > 0.0))
                } else {
                    match self.try_stick_multipliers(q, v, u) {
                        Ok(theta) => Ok(theta),
                        Err(Error::StickInfeasible { value }) => {
                            // value < 0 on the mode that would need negative
                            // weight; the body slips toward the other side.
                            let positive = match hint {
                                Some(h) if h != 0.0 => h > 0.0,
                                _ => value > 0.0,
                            };
                            Ok(Self::slip_theta(gamma, positive))
                        }
                        Err(e) => Err(e),
                    }
                }
            }
            SystemKind::Spatial => {
                // Slip combination; the relaxed stick band |v_t| < eps_t is
                // handled by the integrator as a c_3 sliding mode.
                Ok(vec![gamma, 1.0 - gamma, 0.0])
            }
        }
    }

    fn slip_theta(gamma: f64, positive: bool) -> Vec<f64> {
        if positive {
            vec![gamma, 1.0 - gamma, 0.0]
        } else {
            vec![gamma, 0.0, 1.0 - gamma]
        }
    }

    /// Stick-mode Filippov multipliers from the closed-form relations
    /// theta_2 + theta_3 = 1 - gamma and
    /// -theta_2 + theta_3 = -gamma * phi_t / (mu * D_t * a_n),
    /// valid under kinetic-metric orthogonality of the contact basis.
    pub fn try_stick_multipliers(&self, q: &[f64], v: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let fr = self.model.friction.as_ref().expect("friction data required");
        assert_eq!(fr.n_t, 1, "closed-form stick multipliers are planar-only");
        let cq = self.model.contact_quantities(q, v, u)?;
        let gamma = cq.d * self.a_n / (cq.d * self.a_n - cq.phi);
        let dt = cq.d_tilde.as_ref().unwrap()[3];
        let phi_t = cq.phi_tilde.as_ref().unwrap()[1];
        let sum = 1.0 - gamma;
        let diff = -gamma * phi_t / (fr.mu * dt * self.a_n);
        let th2 = (sum - diff) / 2.0;
        let th3 = (sum + diff) / 2.0;
        if th2 < -1e-10 || th3 < -1e-10 {
            return Err(Error::StickInfeasible {
                value: if th2 < th3 { th2 } else { -th3 },
            });
        }
        Ok(vec![gamma, th2.max(0.0), th3.max(0.0)])
    }

    /// Classify the local behavior at a point on a switching surface.
    pub fn surface_classification(&self, y: &[f64], u: &[f64]) -> Result<SurfaceClass> {
        let (q, v, _) = self.split(y);
        let cq = self.model.contact_quantities(q, v, u)?;
        let tol = (10.0 * self.model.contact_tol).max(1e-7);
        let nv = dot(&cq.n, v);
        if cq.f_c.abs() <= tol {
            if nv.abs() <= tol {
                if cq.phi <= 0.0 {
                    return Ok(SurfaceClass::SlideStable);
                }
                return Ok(SurfaceClass::Leaving);
            }
            if nv < -tol {
                return Ok(SurfaceClass::AuxEnter);
            }
        }
        Ok(SurfaceClass::Crossing)
    }
}

/// Algebraic encoding of the piecewise-smooth system: the multipliers
/// theta are linked to step-function values alpha of the switching
/// functions, and c(y) is split into nonnegative parts (lambda_p,
/// lambda_n) complementary to (e - alpha, alpha).
///
/// Mode ordering here follows the link function: with friction, the
/// second algebraic mode is the auxiliary field for c_3 < 0 and the third
/// for c_3 > 0, i.e. columns (1, 3, 2) of [`TimeFreezingSystem::modes`].
pub struct DCSystem<D: CLSDynamics> {
    pub sys: Arc<TimeFreezingSystem<D>>,
    pub n_f: usize,
    pub n_c: usize,
}

pub fn build_dcs<D: CLSDynamics>(sys: Arc<TimeFreezingSystem<D>>) -> DCSystem<D> {
    DCSystem {
        n_f: sys.n_f,
        n_c: sys.n_c,
        sys,
    }
}

impl<D: CLSDynamics> DCSystem<D> {
    /// z = (theta, alpha, lambda_p, lambda_n).
    pub fn n_z(&self) -> usize {
        self.n_f + 3 * self.n_c
    }

    pub fn split_z<'a, S>(&self, z: &'a [S]) -> (&'a [S], &'a [S], &'a [S], &'a [S]) {
        let (nf, nc) = (self.n_f, self.n_c);
        (
            &z[..nf],
            &z[nf..nf + nc],
            &z[nf + nc..nf + 2 * nc],
            &z[nf + 2 * nc..nf + 3 * nc],
        )
    }

    /// Mode columns in algebraic ordering (see type docs).
    pub fn modes<S: Scalar>(&self, y: &[S], u: &[S]) -> Result<Vec<Vec<S>>> {
        let mut cols = self.sys.modes(y, u)?;
        if self.n_f == 3 {
            cols.swap(1, 2);
        }
        Ok(cols)
    }

    pub fn ode_rhs<S: Scalar>(&self, y: &[S], u: &[S], theta: &[S]) -> Result<Vec<S>> {
        let cols = self.modes(y, u)?;
        let mut out = vec![S::zero(); self.sys.n_y];
        for (th, col) in theta.iter().zip(&cols) {
            for (o, c) in out.iter_mut().zip(col) {
                *o = o.clone() + th.clone() * c.clone();
            }
        }
        Ok(out)
    }

    /// Multiplier-link residual g_F(theta, alpha).
    pub fn g_f<S: Scalar>(&self, theta: &[S], alpha: &[S]) -> Vec<S> {
        let one = S::one();
        let a1 = alpha[0].clone();
        let a2 = alpha[1].clone();
        let ind1 = a1.clone() + (one.clone() - a1.clone()) * a2.clone();
        let rest = (one.clone() - a1) * (one.clone() - a2);
        if self.n_f == 2 {
            vec![
                theta[0].clone() - ind1,
                theta[1].clone() - rest,
            ]
        } else {
            let a3 = alpha[2].clone();
            vec![
                theta[0].clone() - ind1,
                theta[1].clone() - rest.clone() * (one - a3.clone()),
                theta[2].clone() - rest * a3,
            ]
        }
    }

    /// Residual c(y) - lambda_p + lambda_n.
    pub fn switch_link<S: Scalar>(&self, y: &[S], lp: &[S], ln_: &[S]) -> Vec<S> {
        self.sys
            .c(y)
            .into_iter()
            .zip(lp.iter().zip(ln_))
            .map(|(c, (p, n))| c - p.clone() + n.clone())
            .collect()
    }

    /// Complementarity pairs as index pairs into z; each pair (i, j) means
    /// pair_a(i) * z[j] = 0 with pair_a in {alpha, e - alpha}.
    /// Returned as (is_upper, alpha_index, lambda_index_in_z).
    pub fn comp_pairs(&self) -> Vec<(bool, usize, usize)> {
        let (nf, nc) = (self.n_f, self.n_c);
        let mut pairs = Vec::with_capacity(2 * nc);
        for i in 0..nc {
            // (alpha_i, lambda_n_i)
            pairs.push((false, nf + i, nf + 2 * nc + i));
            // (1 - alpha_i, lambda_p_i)
            pairs.push((true, nf + i, nf + nc + i));
        }
        pairs
    }

    /// Consistent algebraic variables for a state strictly inside a region:
    /// alpha = step(c), theta = region indicator, lambdas = |c| split.
    pub fn consistent_z(&self, y: &[f64], _u: &[f64]) -> Vec<f64> {
        let c = self.sys.c(y);
        let nc = self.n_c;
        let alpha: Vec<f64> = c.iter().map(|&ci| if ci > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut theta = vec![0.0; self.n_f];
        let ind1 = alpha[0] + (1.0 - alpha[0]) * alpha[1];
        let rest = (1.0 - alpha[0]) * (1.0 - alpha[1]);
        theta[0] = ind1;
        if self.n_f == 2 {
            theta[1] = rest;
        } else {
            theta[1] = rest * (1.0 - alpha[2]);
            theta[2] = rest * alpha[2];
        }
        let mut z = theta;
        z.extend(alpha);
        for i in 0..nc {
            z.push(c[i].max(0.0)); // lambda_p
        }
        for i in 0..nc {
            z.push((-c[i]).max(0.0)); // lambda_n
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::PointMass2D;
    use crate::diffkit::Scalar;
    use crate::model::CLSDynamics;

    const G: f64 = 9.81;

    fn frictionless(a_n: f64) -> TimeFreezingSystem<PointMass2D> {
        build(
            CLSModel::new(PointMass2D { g: G }),
            a_n,
            BuildOptions::default(),
        )
        .unwrap()
    }

    fn frictional(mu: f64, a_n: f64) -> TimeFreezingSystem<PointMass2D> {
        build(
            CLSModel::new(PointMass2D { g: G }).with_friction(mu, 1),
            a_n,
            BuildOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn guiding_example_modes() {
        let sys = frictionless(50.0);
        let y = [0.3, 0.8, 1.0, -2.0, 0.1];
        let u = [7.0, 0.5];
        let c = sys.c(&y);
        assert_eq!(c, vec![0.8, -2.0]);
        let cols = sys.modes(&y, &u).unwrap();
        assert_eq!(cols[0], vec![1.0, -2.0, 7.0, -G + 0.5, 1.0]);
        assert_eq!(cols[1], vec![0.0, 0.0, 0.0, 50.0, 0.0]);
    }

    #[test]
    fn frictional_modes() {
        let sys = frictional(0.6, 100.0);
        let y = [0.0, 0.0, 2.0, -1.0, 0.0];
        let u = [0.0, 0.0];
        let cols = sys.modes(&y, &u).unwrap();
        assert_eq!(cols[1], vec![0.0, 0.0, -60.0, 100.0, 0.0]);
        assert_eq!(cols[2], vec![0.0, 0.0, 60.0, 100.0, 0.0]);
        let c = sys.c(&y);
        assert_eq!(c, vec![0.0, -1.0, 2.0]);
    }

    /// Curved constraint with identity inertia: the auxiliary velocity
    /// rate must equal n(q) * a_n.
    #[test]
    fn aux_follows_normal_for_identity_inertia() {
        struct Bowl;
        impl CLSDynamics for Bowl {
            fn n_q(&self) -> usize {
                2
            }
            fn n_u(&self) -> usize {
                0
            }
            fn f_v<S: Scalar>(&self, _q: &[S], _v: &[S], _u: &[S]) -> Vec<S> {
                vec![S::zero(), S::constant(-9.81)]
            }
            fn mass<S: Scalar>(&self, _q: &[S]) -> Vec<S> {
                vec![S::one(), S::zero(), S::zero(), S::one()]
            }
            fn gap<S: Scalar>(&self, q: &[S]) -> S {
                q[1].clone() - (q[0].clone() * q[0].clone()).scale(0.3)
            }
        }
        let sys = build(CLSModel::new(Bowl), 20.0, BuildOptions::default()).unwrap();
        let q = [0.7, 0.3 * 0.49];
        let y = [q[0], q[1], 0.0, -1.0, 0.0];
        let aux = sys.f_aux_normal(&y).unwrap();
        let n = sys.model.normal(&q);
        assert!((aux[2] - 20.0 * n[0]).abs() < 1e-14);
        assert!((aux[3] - 20.0 * n[1]).abs() < 1e-14);
        assert_eq!(&aux[..2], &[0.0, 0.0]);
        assert_eq!(aux[4], 0.0);
    }

    #[test]
    fn zero_normal_refused() {
        struct Degenerate;
        impl CLSDynamics for Degenerate {
            fn n_q(&self) -> usize {
                2
            }
            fn n_u(&self) -> usize {
                0
            }
            fn f_v<S: Scalar>(&self, _q: &[S], _v: &[S], _u: &[S]) -> Vec<S> {
                vec![S::zero(), S::zero()]
            }
            fn mass<S: Scalar>(&self, _q: &[S]) -> Vec<S> {
                vec![S::one(), S::zero(), S::zero(), S::one()]
            }
            fn gap<S: Scalar>(&self, q: &[S]) -> S {
                // Gradient vanishes at q = 0.
                q[0].clone() * q[0].clone() + q[1].clone() * q[1].clone()
            }
        }
        let res = build(
            CLSModel::new(Degenerate),
            10.0,
            BuildOptions {
                normal_check_points: vec![vec![0.0, 0.0]],
                ..Default::default()
            },
        );
        assert!(matches!(res, Err(Error::ZeroNormal)));
    }

    #[test]
    fn jump_time_formula() {
        let sys = frictionless(10.0);
        // D = 1, n^T v = -1 on flat ground.
        let tau = sys.aux_jump_time(&[0.0, 0.0, 3.0, -1.0, 0.0]).unwrap();
        assert!((tau - 0.1).abs() < 1e-15);
        let tau0 = sys.aux_jump_time(&[0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(tau0, 0.0);
        assert!(sys.aux_jump_time(&[0.0, 1.0, 0.0, -1.0, 0.0]).is_err());
    }

    /// The analytic jump duration must agree with brute-force explicit
    /// Euler integration of the auxiliary field.
    #[test]
    fn jump_time_matches_euler_oracle() {
        let sys = frictionless(G);
        let y0 = [1.2, 0.0, 0.4, -3.1, 0.7];
        let tau = sys.aux_jump_time(&y0).unwrap();
        let mut y = y0.to_vec();
        let h = 1e-7;
        let mut elapsed = 0.0;
        while y[3] < 0.0 {
            let f = sys.f_aux_normal(&y).unwrap();
            for i in 0..5 {
                y[i] += h * f[i];
            }
            elapsed += h;
        }
        assert!((elapsed - tau).abs() < 1e-6, "euler {elapsed} vs formula {tau}");
        assert_eq!(y[0], y0[0]);
        assert_eq!(y[1], y0[1]);
    }

    #[test]
    fn gamma_values() {
        let sys = frictionless(G);
        let g1 = sys.gamma(&[0.0, 0.0], &[2.0, 0.0], &[7.0, 0.0]).unwrap();
        assert!((g1 - 0.5).abs() < 1e-12);
        let g2 = sys.gamma(&[0.0, 0.0], &[2.0, 0.0], &[0.0, G]).unwrap();
        assert!((g2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frictionless_sliding_multipliers() {
        let sys = frictionless(G);
        let th = sys
            .sliding_multipliers(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], None)
            .unwrap();
        assert!((th[0] - 0.5).abs() < 1e-12 && (th[1] - 0.5).abs() < 1e-12);
        // Contact about to break: phi = 0.
        let th0 = sys
            .sliding_multipliers(&[0.0, 0.0], &[1.0, 0.0], &[0.0, G], None)
            .unwrap();
        assert!((th0[0] - 1.0).abs() < 1e-12 && th0[1].abs() < 1e-12);
        // theta_1 always equals gamma.
        for u2 in [-3.0, -1.0, 0.0] {
            let th = sys
                .sliding_multipliers(&[0.0, 0.0], &[1.0, 0.0], &[0.3, u2], None)
                .unwrap();
            let g = sys.gamma(&[0.0, 0.0], &[1.0, 0.0], &[0.3, u2]).unwrap();
            assert!((th[0] - g).abs() < 1e-14);
            assert!((th[0] + th[1] - 1.0).abs() < 1e-14);
        }
    }

    /// Sliding combination must reproduce the constrained dynamics scaled
    /// by gamma, for the frictionless, slip, and stick variants.
    #[test]
    fn sliding_identity() {
        // Frictionless.
        let sys = frictionless(G);
        let (q, v, u) = ([0.4, 0.0], [1.3, 0.0], [0.6, -0.5]);
        let y = [q[0], q[1], v[0], v[1], 0.0];
        let th = sys.sliding_multipliers(&q, &v, &u, None).unwrap();
        let rhs = sys.rhs(&y, &u, &th).unwrap();
        let g = sys.gamma(&q, &v, &u).unwrap();
        let fd = sys.model.f_dae(&q, &v, &u).unwrap();
        for i in 0..4 {
            assert!((rhs[i] - g * fd[i]).abs() < 1e-10);
        }
        assert!((rhs[4] - g).abs() < 1e-12);

        // Slip.
        let sys = frictional(0.6, G);
        let v_slip = [1.3, 0.0];
        let th = sys.sliding_multipliers(&q, &v_slip, &u, None).unwrap();
        let y = [q[0], q[1], v_slip[0], v_slip[1], 0.0];
        let rhs = sys.rhs(&y, &u, &th).unwrap();
        let g = sys.gamma(&q, &v_slip, &u).unwrap();
        let fs = sys.model.f_slip(&q, &v_slip, &u).unwrap();
        for i in 0..4 {
            assert!((rhs[i] - g * fs[i]).abs() < 1e-10);
        }

        // Stick: zero tangential velocity, tangential force inside cone.
        let v_stick = [0.0, 0.0];
        let u_stick = [0.3, -0.5];
        let th = sys.sliding_multipliers(&q, &v_stick, &u_stick, None).unwrap();
        assert!(th.iter().all(|&t| t >= 0.0));
        assert!((th.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let y = [q[0], q[1], 0.0, 0.0, 0.0];
        let rhs = sys.rhs(&y, &u_stick, &th).unwrap();
        let g = sys.gamma(&q, &v_stick, &u_stick).unwrap();
        let fst = sys.model.f_stick(&q, &v_stick, &u_stick).unwrap();
        for i in 0..4 {
            assert!(
                (rhs[i] - g * fst[i]).abs() < 1e-10,
                "component {i}: {} vs {}",
                rhs[i],
                g * fst[i]
            );
        }
        assert!((rhs[4] - g).abs() < 1e-12);
    }

    #[test]
    fn stick_infeasible_falls_back_to_slip() {
        let sys = frictional(0.1, G);
        // Strong tangential force, weak friction: stick impossible.
        let (q, v, u) = ([0.0, 0.0], [0.0, 0.0], [8.0, 0.0]);
        assert!(matches!(
            sys.try_stick_multipliers(&q, &v, &u),
            Err(Error::StickInfeasible { .. })
        ));
        let th = sys.sliding_multipliers(&q, &v, &u, None).unwrap();
        // Body accelerates forward: slip-positive combination, mode 3 idle.
        assert_eq!(th[2], 0.0);
        assert!(th[1] > 0.0);
    }

    #[test]
    fn classification_cases() {
        let sys = frictionless(G);
        // On the surface, pressing force: stable sliding.
        let cls = sys
            .surface_classification(&[0.0, 0.0, 1.0, 0.0, 0.0], &[7.0, 0.0])
            .unwrap();
        assert_eq!(cls, SurfaceClass::SlideStable);
        // Upward force exceeding gravity: leaves the surface.
        let cls = sys
            .surface_classification(&[0.0, 0.0, 1.0, 0.0, 0.0], &[7.0, 2.0 * G])
            .unwrap();
        assert_eq!(cls, SurfaceClass::Leaving);
        // Touchdown with approaching velocity.
        let cls = sys
            .surface_classification(&[0.0, 0.0, 1.0, -2.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(cls, SurfaceClass::AuxEnter);
    }

    #[test]
    fn link_function_pure_regions() {
        let sys = Arc::new(frictional(0.6, G));
        let dcs = build_dcs(sys);
        let r = dcs.g_f(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]);
        assert!(r.iter().all(|&x| x == 0.0));
        // alpha = (0,0,1) forces theta = (0,0,1).
        let r = dcs.g_f(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]);
        assert!(r.iter().all(|&x| x == 0.0));
        let r = dcs.g_f(&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]);
        assert!(r.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn link_function_multipliers_sum_to_one() {
        let sys = Arc::new(frictional(0.6, G));
        let dcs = build_dcs(sys);
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rng = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let alpha = [rng(), rng(), rng()];
            // theta determined explicitly by g_F = 0.
            let ind1 = alpha[0] + (1.0 - alpha[0]) * alpha[1];
            let rest = (1.0 - alpha[0]) * (1.0 - alpha[1]);
            let theta = [ind1, rest * (1.0 - alpha[2]), rest * alpha[2]];
            let r = dcs.g_f(&theta, &alpha);
            assert!(r.iter().all(|&x| x.abs() < 1e-15));
            assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    /// Algebraic mode ordering: a state with c_3 > 0 (forward tangential
    /// velocity) must select the decelerating auxiliary field.
    #[test]
    fn dcs_mode_ordering_matches_regions() {
        let sys = Arc::new(frictional(0.6, 100.0));
        let dcs = build_dcs(sys);
        let y = [0.0, -0.01, 2.0, -1.0, 0.0];
        let u = [0.0, 0.0];
        let z = dcs.consistent_z(&y, &u);
        let (theta, alpha, _, _) = dcs.split_z(&z);
        assert_eq!(alpha, &[0.0, 0.0, 1.0]);
        assert_eq!(theta, &[0.0, 0.0, 1.0]);
        let rhs = dcs.ode_rhs(&y, &u, theta).unwrap();
        // Tangential deceleration (-mu a_n) and normal push (+a_n).
        assert_eq!(rhs[2], -60.0);
        assert_eq!(rhs[3], 100.0);
    }

    #[test]
    fn tiny_mu_matches_frictionless_columns() {
        let fricless = frictionless(G);
        let fric = frictional(1e-13, G);
        let y = [0.2, -0.1, 1.0, -0.5, 0.0];
        let u = [0.4, 0.2];
        let a = fricless.modes(&y, &u).unwrap();
        let b = fric.modes(&y, &u).unwrap();
        for i in 0..5 {
            assert!((a[0][i] - b[0][i]).abs() < 1e-14);
            assert!((a[1][i] - b[1][i]).abs() < 1e-12);
            assert!((a[1][i] - b[2][i]).abs() < 1e-12);
        }
    }
}
