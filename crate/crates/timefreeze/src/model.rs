//! Rigid-body systems with a single unilateral gap constraint and optional
//! Coulomb friction, plus the contact-analysis quantities derived from them.
//!
//! All geometric quantities (constraint normal, gap acceleration) come from
//! automatic differentiation of the user-declared gap function, so normals,
//! forces and region tests can never drift apart.

use crate::diffkit::{dot, gradient, norm2, solve_dense, Dual, Scalar};
use crate::error::{Error, Result};

/// User-declared dynamics: inertia, smooth forces, gap, tangent basis.
///
/// Methods are generic over the scalar so the same declaration yields
/// values and derivatives of any order. `mass` returns row-major storage;
/// `tangents` returns the columns of the tangent basis at the contact
/// (empty when the model is frictionless).
pub trait CLSDynamics: Send + Sync + 'static {
    fn n_q(&self) -> usize;
    fn n_u(&self) -> usize;
    fn f_v<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Vec<S>;
    fn mass<S: Scalar>(&self, q: &[S]) -> Vec<S>;
    fn gap<S: Scalar>(&self, q: &[S]) -> S;
    fn tangents<S: Scalar>(&self, _q: &[S]) -> Vec<Vec<S>> {
        Vec::new()
    }
}

#[derive(Clone, Debug)]
pub struct FrictionModel {
    pub mu: f64,
    /// Number of tangent directions: 1 (planar) or 2 (spatial).
    pub n_t: usize,
}

pub struct CLSModel<D: CLSDynamics> {
    pub dynamics: D,
    pub friction: Option<FrictionModel>,
    /// Relaxation radius for the spatial stick switching function.
    pub eps_t: f64,
    /// Absolute tolerance deciding whether the contact is active.
    pub contact_tol: f64,
}

impl<D: CLSDynamics> CLSModel<D> {
    pub fn new(dynamics: D) -> Self {
        CLSModel {
            dynamics,
            friction: None,
            eps_t: 1e-4,
            contact_tol: 1e-9,
        }
    }

    pub fn with_friction(mut self, mu: f64, n_t: usize) -> Self {
        assert!(mu > 0.0 && (n_t == 1 || n_t == 2));
        self.friction = Some(FrictionModel { mu, n_t });
        self
    }

    pub fn n_q(&self) -> usize {
        self.dynamics.n_q()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.n_u()
    }

    /// 2 n_q mechanical states.
    pub fn n_x(&self) -> usize {
        2 * self.dynamics.n_q()
    }

    pub fn contact_active(&self, q: &[f64]) -> bool {
        self.dynamics.gap(q).abs() <= self.contact_tol
    }

    /// Kinetic energy 1/2 v^T M(q) v.
    pub fn kinetic_energy(&self, q: &[f64], v: &[f64]) -> f64 {
        let n = self.n_q();
        let m = self.dynamics.mass(q);
        let mut e = 0.0;
        for i in 0..n {
            for j in 0..n {
                e += 0.5 * v[i] * m[i * n + j] * v[j];
            }
        }
        e
    }

    /// Constraint normal n(q) = d(gap)/dq.
    pub fn normal<S: Scalar>(&self, q: &[S]) -> Vec<S> {
        gradient(|qd: &[Dual<S>]| self.dynamics.gap(qd), q)
    }

    /// Solve M(q) X = B for several right-hand sides (columns of `b`).
    fn inertia_solve<S: Scalar>(&self, q: &[S], b: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let n = self.n_q();
        let m0 = self.dynamics.mass(q);
        b.iter()
            .map(|col| {
                let mut m = m0.clone();
                let mut rhs = col.clone();
                solve_dense(&mut m, &mut rhs, n).map_err(|_| Error::SingularInertia)?;
                Ok(rhs)
            })
            .collect()
    }

    /// d/dt (w(q)^T v) along the flow q' = v, for a q-dependent weight
    /// vector; `w` must produce the weight at dual-lifted q.
    fn weighted_velocity_rate<S: Scalar>(
        &self,
        q: &[S],
        v: &[S],
        w: impl Fn(&[Dual<S>]) -> Vec<Dual<S>>,
    ) -> S {
        let vl: Vec<Dual<S>> = v.iter().map(|x| Dual::lift(x.clone())).collect();
        let grad = gradient(|qd: &[Dual<S>]| dot(&w(qd), &vl), q);
        dot(&grad, v)
    }

    pub fn contact_quantities<S: Scalar>(
        &self,
        q: &[S],
        v: &[S],
        u: &[S],
    ) -> Result<ContactQuantities<S>> {
        let n = self.normal(q);
        let zero_normal = norm2(&n).val() < 1e-12;
        let fv = self.dynamics.f_v(q, v, u);

        let minv_n = self.inertia_solve(q, std::slice::from_ref(&n))?.remove(0);
        let d = dot(&n, &minv_n);

        // phi = n^T f_v + d/dq(n^T v)^T v : the gap acceleration along the
        // unconstrained flow. The inner normal needs one more dual level.
        let phi_geo = self.weighted_velocity_rate(q, v, |qd| {
            gradient(|qdd: &[Dual<Dual<S>>]| self.dynamics.gap(qdd), qd)
        });
        let phi = dot(&n, &fv) + phi_geo;

        let (d_tilde, phi_tilde, v_t) = if let Some(fr) = &self.friction {
            let cols_b = self.dynamics.tangents(q);
            assert_eq!(cols_b.len(), fr.n_t, "tangent basis width mismatch");
            let mut basis = vec![n.clone()];
            basis.extend(cols_b.iter().cloned());
            let minv_basis = self.inertia_solve(q, &basis)?;
            let k = basis.len();
            let mut dt = vec![S::zero(); k * k];
            for i in 0..k {
                for j in 0..k {
                    dt[i * k + j] = dot(&basis[i], &minv_basis[j]);
                }
            }
            let mut pt = Vec::with_capacity(k);
            pt.push(phi.clone());
            for (idx, b) in cols_b.iter().enumerate() {
                let geo = self.weighted_velocity_rate(q, v, |qd| {
                    self.dynamics.tangents(qd)[idx].clone()
                });
                pt.push(dot(b, &fv) + geo);
            }
            let vt = cols_b.iter().map(|b| dot(b, v)).collect();
            (Some(dt), Some(pt), Some(vt))
        } else {
            (None, None, None)
        };

        Ok(ContactQuantities {
            f_c: self.dynamics.gap(q),
            n,
            d,
            d_tilde,
            phi,
            phi_tilde,
            v_t,
            zero_normal,
        })
    }

    /// Normal contact force from the scalar complementarity condition
    /// between gap acceleration and force: max(0, -phi/D).
    pub fn contact_force_lcp(&self, q: &[f64], v: &[f64], u: &[f64]) -> Result<f64> {
        let cq = self.contact_quantities(q, v, u)?;
        Ok((-cq.phi / cq.d).max0())
    }

    /// Unconstrained dynamics (v, f_v).
    pub fn f_ode<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Vec<S> {
        let mut out = v.to_vec();
        out.extend(self.dynamics.f_v(q, v, u));
        out
    }

    /// Persistent frictionless contact: force chosen so the gap
    /// acceleration vanishes along the flow.
    pub fn f_dae<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Result<Vec<S>> {
        let cq = self.contact_quantities(q, v, u)?;
        let minv_n = self.inertia_solve(q, std::slice::from_ref(&cq.n))?.remove(0);
        let scale = cq.phi.clone() / cq.d.clone();
        let fv = self.dynamics.f_v(q, v, u);
        let mut out = v.to_vec();
        out.extend(
            fv.into_iter()
                .zip(minv_n)
                .map(|(a, w)| a - w * scale.clone()),
        );
        Ok(out)
    }

    /// Contact with sliding friction: normal force as in `f_dae`, friction
    /// force opposing v_t on the friction-cone boundary.
    pub fn f_slip<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Result<Vec<S>> {
        let fr = self.friction.as_ref().expect("friction data required");
        let cq = self.contact_quantities(q, v, u)?;
        let vt = cq.v_t.as_ref().unwrap();
        let vt_norm = norm2(vt);
        if vt_norm.val() < 1e-12 {
            return Err(Error::DegenerateTangential);
        }
        let cols_b = self.dynamics.tangents(q);
        // dir = n - mu * B v_t / |v_t|
        let mut dir = cq.n.clone();
        for (b, vti) in cols_b.iter().zip(vt) {
            let coef = vti.clone().scale(fr.mu) / vt_norm.clone();
            for (di, bi) in dir.iter_mut().zip(b) {
                *di = di.clone() - bi.clone() * coef.clone();
            }
        }
        let minv_dir = self.inertia_solve(q, std::slice::from_ref(&dir))?.remove(0);
        let scale = cq.phi.clone() / cq.d.clone();
        let fv = self.dynamics.f_v(q, v, u);
        let mut out = v.to_vec();
        out.extend(
            fv.into_iter()
                .zip(minv_dir)
                .map(|(a, w)| a - w * scale.clone()),
        );
        Ok(out)
    }

    /// Sticking contact: normal and tangential forces solved jointly so the
    /// normal and tangential velocity rates both vanish.
    pub fn f_stick<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Result<Vec<S>> {
        let lam = self.stick_multipliers(q, v, u)?;
        self.f_stick_with(q, v, u, &lam)
    }

    /// Stick force vector lambda = -D_tilde^{-1} phi_tilde, entries
    /// (normal, tangential...).
    pub fn stick_multipliers<S: Scalar>(&self, q: &[S], v: &[S], u: &[S]) -> Result<Vec<S>> {
        let fr = self.friction.as_ref().expect("friction data required");
        let cq = self.contact_quantities(q, v, u)?;
        let k = 1 + fr.n_t;
        let mut dt = cq.d_tilde.unwrap();
        let mut rhs: Vec<S> = cq.phi_tilde.unwrap().iter().map(|x| -x.clone()).collect();
        solve_dense(&mut dt, &mut rhs, k).map_err(|_| Error::SingularInertia)?;
        Ok(rhs)
    }

    fn f_stick_with<S: Scalar>(&self, q: &[S], v: &[S], u: &[S], lam: &[S]) -> Result<Vec<S>> {
        let n = self.normal(q);
        let cols_b = self.dynamics.tangents(q);
        let nq = self.n_q();
        // force = [n B] lam
        let mut force = vec![S::zero(); nq];
        for i in 0..nq {
            force[i] = n[i].clone() * lam[0].clone();
            for (j, b) in cols_b.iter().enumerate() {
                force[i] = force[i].clone() + b[i].clone() * lam[1 + j].clone();
            }
        }
        let minv_f = self.inertia_solve(q, std::slice::from_ref(&force))?.remove(0);
        let fv = self.dynamics.f_v(q, v, u);
        let mut out = v.to_vec();
        out.extend(fv.into_iter().zip(minv_f).map(|(a, w)| a + w));
        Ok(out)
    }
}

/// Everything the contact analysis needs at one state: normal, Delassus
/// scalar D = n^T M^{-1} n, gap acceleration phi, and (with friction) their
/// tangential extensions and the tangential velocity.
#[derive(Clone, Debug)]
pub struct ContactQuantities<S> {
    pub f_c: S,
    pub n: Vec<S>,
    pub d: S,
    pub d_tilde: Option<Vec<S>>,
    pub phi: S,
    pub phi_tilde: Option<Vec<S>>,
    pub v_t: Option<Vec<S>>,
    pub zero_normal: bool,
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

/// States at which a model is validated.
#[derive(Clone, Debug)]
pub struct ModelSample {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

/// Check inertia positive definiteness, tangent-basis orthogonality in the
/// kinetic metric at contact configurations, and gradient consistency of
/// the gap function against finite differences. Report-only.
pub fn validate_model<D: CLSDynamics>(
    model: &CLSModel<D>,
    samples: &[ModelSample],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nq = model.n_q();
    for (si, s) in samples.iter().enumerate() {
        let m = model.dynamics.mass(&s.q);
        let dm = nalgebra::DMatrix::from_row_slice(nq, nq, &m);
        let sym_err = (&dm - dm.transpose()).abs().max();
        if sym_err > 1e-10 {
            report
                .issues
                .push(format!("sample {si}: inertia not symmetric (err {sym_err:.2e})"));
        }
        if dm.clone().cholesky().is_none() {
            report
                .issues
                .push(format!("sample {si}: inertia not positive definite"));
            continue;
        }

        // Gap gradient vs central differences.
        let n = model.normal(&s.q);
        let h = 1e-6;
        for i in 0..nq {
            let mut qp = s.q.clone();
            let mut qm = s.q.clone();
            qp[i] += h;
            qm[i] -= h;
            let fd = (model.dynamics.gap(&qp) - model.dynamics.gap(&qm)) / (2.0 * h);
            let err = (n[i] - fd).abs() / fd.abs().max(1.0);
            if err > 1e-6 {
                report.issues.push(format!(
                    "sample {si}: gap gradient component {i} off by {err:.2e} vs finite differences"
                ));
            }
        }

        // Orthogonality of the contact basis in the kinetic metric, only
        // meaningful where the contact is active.
        if model.friction.is_some() && model.dynamics.gap(&s.q).abs() <= model.contact_tol {
            let cols_b = model.dynamics.tangents(&s.q);
            let chol = dm.clone().cholesky().unwrap();
            let nv = nalgebra::DVector::from_column_slice(&n);
            let minv_n = chol.solve(&nv);
            for (j, b) in cols_b.iter().enumerate() {
                let bv = nalgebra::DVector::from_column_slice(b);
                let ip = bv.dot(&minv_n);
                if ip.abs() > 1e-10 {
                    report.issues.push(format!(
                        "sample {si}: tangent {j} not orthogonal to normal in kinetic metric ({ip:.2e})"
                    ));
                }
            }
            if cols_b.len() == 2 {
                let b0 = nalgebra::DVector::from_column_slice(&cols_b[0]);
                let b1 = nalgebra::DVector::from_column_slice(&cols_b[1]);
                let ip = b0.dot(&chol.solve(&b1));
                if ip.abs() > 1e-10 {
                    report.issues.push(format!(
                        "sample {si}: tangent directions not mutually orthogonal ({ip:.2e})"
                    ));
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{CurvedGap, PointMass2D};

    const G: f64 = 9.81;

    fn ball() -> CLSModel<PointMass2D> {
        CLSModel::new(PointMass2D { g: G })
    }

    fn ball_friction(mu: f64) -> CLSModel<PointMass2D> {
        CLSModel::new(PointMass2D { g: G }).with_friction(mu, 1)
    }

    #[test]
    fn flat_ground_quantities() {
        let m = ball();
        let cq = m
            .contact_quantities(&[0.3, 0.0], &[1.0, -0.2], &[0.0, 0.0])
            .unwrap();
        assert_eq!(cq.n, vec![0.0, 1.0]);
        assert!((cq.d - 1.0).abs() < 1e-14);
        assert!((cq.phi + G).abs() < 1e-12);
        let cq2 = m
            .contact_quantities(&[0.3, 0.0], &[1.0, 0.0], &[0.0, 2.5])
            .unwrap();
        assert!((cq2.phi - (-G + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn identity_zero_case() {
        struct Flat;
        impl CLSDynamics for Flat {
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
                q[0].clone()
            }
        }
        let m = CLSModel::new(Flat);
        let cq = m.contact_quantities(&[0.0, 1.0], &[0.0, 0.0], &[]).unwrap();
        assert_eq!(cq.d, 1.0);
        assert_eq!(cq.phi, 0.0);
    }

    /// phi must equal the second time derivative of the gap along the
    /// unconstrained flow; checked by central differences on the composed
    /// flow for a curved gap and non-identity inertia.
    #[test]
    fn phi_matches_gap_acceleration() {
        let m = CLSModel::new(CurvedGap::default());
        let q = [0.4, 0.9];
        let v = [0.7, -0.3];
        let u = [0.2, -0.1];
        let cq = m.contact_quantities(&q, &v, &u).unwrap();

        // Integrate the smooth flow a tiny step forward/backward with RK4
        // and difference the gap twice.
        let rk4 = |q0: &[f64], v0: &[f64], h: f64| -> (Vec<f64>, Vec<f64>) {
            let f = |q: &[f64], v: &[f64]| m.f_ode(q, v, &u);
            let s = |a: &[f64], b: &[f64], c: f64| -> Vec<f64> {
                a.iter().zip(b).map(|(x, y)| x + c * y).collect()
            };
            let split = |k: &[f64]| (k[..2].to_vec(), k[2..].to_vec());
            let k1 = f(q0, v0);
            let (q1, v1) = split(&k1);
            let k2 = f(&s(q0, &q1, h / 2.0), &s(v0, &v1, h / 2.0));
            let (q2, v2) = split(&k2);
            let k3 = f(&s(q0, &q2, h / 2.0), &s(v0, &v2, h / 2.0));
            let (q3, v3) = split(&k3);
            let k4 = f(&s(q0, &q3, h), &s(v0, &v3, h));
            let (q4, v4) = split(&k4);
            let qn = (0..2)
                .map(|i| q0[i] + h / 6.0 * (q1[i] + 2.0 * q2[i] + 2.0 * q3[i] + q4[i]))
                .collect();
            let vn = (0..2)
                .map(|i| v0[i] + h / 6.0 * (v1[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]))
                .collect();
            (qn, vn)
        };
        let h = 1e-4;
        let (qp, _) = rk4(&q, &v, h);
        let (qm, _) = rk4(&q, &v, -h);
        let fd =
            (m.dynamics.gap(&qp) - 2.0 * m.dynamics.gap(&q) + m.dynamics.gap(&qm)) / (h * h);
        let rel = (cq.phi - fd).abs() / fd.abs().max(1.0);
        assert!(rel < 1e-6, "phi {} vs flow fd {}", cq.phi, fd);
    }

    #[test]
    fn lcp_force_on_ground() {
        let m = ball();
        let lam = m.contact_force_lcp(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((lam - G).abs() < 1e-12);
        // phi = 0 boundary
        let lam0 = m.contact_force_lcp(&[0.0, 0.0], &[1.0, 0.0], &[0.0, G]).unwrap();
        assert_eq!(lam0, 0.0);
    }

    #[test]
    fn lcp_matches_active_set_enumeration() {
        let m = CLSModel::new(CurvedGap::default());
        let pts = [
            ([0.1, 0.3], [0.5, -0.1], [0.3, 0.0]),
            ([-0.4, 0.8], [-0.2, 0.6], [0.0, 1.0]),
            ([0.9, 0.2], [0.1, 0.1], [-0.5, 0.2]),
        ];
        for (q, v, u) in pts {
            let cq = m.contact_quantities(&q, &v, &u).unwrap();
            let lam = m.contact_force_lcp(&q, &v, &u).unwrap();
            // Enumerate the two active sets of: 0 <= D lam + phi  perp  lam >= 0.
            let candidates = [0.0, -cq.phi / cq.d];
            let best = candidates
                .iter()
                .copied()
                .find(|&l| l >= -1e-15 && cq.d * l + cq.phi >= -1e-12)
                .unwrap();
            assert!((lam - best).abs() < 1e-12);
            assert!(lam * (cq.d * lam + cq.phi) < 1e-12);
        }
    }

    #[test]
    fn ode_structure() {
        let m = ball();
        let f = m.f_ode(&[0.0, 1.0], &[2.0, 3.0], &[0.5, 0.1]);
        assert_eq!(f, vec![2.0, 3.0, 0.5, -G + 0.1]);
    }

    #[test]
    fn dae_cancels_gravity() {
        let m = ball();
        let f = m.f_dae(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((f[2]).abs() < 1e-14 && f[3].abs() < 1e-13);
        let f7 = m.f_dae(&[0.0, 0.0], &[1.0, 0.0], &[7.0, 0.0]).unwrap();
        assert!((f7[2] - 7.0).abs() < 1e-14 && f7[3].abs() < 1e-13);
    }

    /// Along the contact-constrained field, the gap acceleration identity
    /// n^T dv/dt + d/dq(n^T v)^T v = 0 must hold.
    #[test]
    fn dae_gap_acceleration_vanishes() {
        let m = CLSModel::new(CurvedGap::default());
        let q = [0.5, CurvedGap::default().surface_height(0.5)];
        let v = [0.8, 0.0];
        let u = [0.1, 0.2];
        let f = m.f_dae(&q, &v, &u).unwrap();
        let cq = m.contact_quantities(&q, &v, &u).unwrap();
        let dvdt = &f[2..];
        let geo = cq.phi - cq.n.iter().zip(m.dynamics.f_v(&q, &v, &u)).map(|(a, b)| a * b).sum::<f64>();
        let resid: f64 = cq.n.iter().zip(dvdt).map(|(a, b)| a * b).sum::<f64>() + geo;
        assert!(resid.abs() < 1e-10, "gap acceleration residual {resid:.2e}");
    }

    #[test]
    fn slip_decelerates_forward_motion() {
        let m = ball_friction(0.6);
        let f = m.f_slip(&[0.0, 0.0], &[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((f[2] + 0.6 * G).abs() < 1e-12);
        assert!(f[3].abs() < 1e-12);
    }

    #[test]
    fn slip_reduces_to_dae_when_mu_zero() {
        // mu must be > 0 in the friction data, so compare against a tiny mu.
        let m_small = CLSModel::new(PointMass2D { g: G }).with_friction(1e-14, 1);
        let m_none = ball();
        let q = [0.2, 0.0];
        let v = [1.5, 0.0];
        let u = [0.3, -0.2];
        let fs = m_small.f_slip(&q, &v, &u).unwrap();
        let fd = m_none.f_dae(&q, &v, &u).unwrap();
        for i in 0..4 {
            assert!((fs[i] - fd[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn stick_holds_tangential_velocity() {
        let m = ball_friction(0.6);
        // Force only along the normal: tangential acceleration must vanish.
        let f = m.f_stick(&[0.0, 0.0], &[0.0, 0.0], &[0.0, -3.0]).unwrap();
        assert!(f[2].abs() < 1e-12);
        assert!(f[3].abs() < 1e-12);
    }

    #[test]
    fn stick_velocity_rates_vanish() {
        let m = CLSModel::new(CurvedGap::default()).with_friction(0.4, 1);
        let x0 = CurvedGap::default().surface_height(0.3);
        let q = [0.3, x0];
        // Stick state: both contact velocity components zero.
        let v = [0.0, 0.0];
        let u = [0.6, -0.4];
        let f = m.f_stick(&q, &v, &u).unwrap();
        let dvdt = &f[2..];
        // d/dt(w^T v) = w^T dv/dt + (dq(w^T v))^T v; second term is 0 at v=0.
        let n = m.normal(&q);
        let b = &m.dynamics.tangents(&q)[0];
        let rn: f64 = n.iter().zip(dvdt).map(|(a, c)| a * c).sum();
        let rt: f64 = b.iter().zip(dvdt).map(|(a, c)| a * c).sum();
        assert!(rn.abs() < 1e-10 && rt.abs() < 1e-10, "rates {rn:.2e} {rt:.2e}");
    }

    #[test]
    fn d_tilde_diagonal_and_consistent() {
        let m = ball_friction(0.6);
        let cq = m
            .contact_quantities(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0])
            .unwrap();
        let dt = cq.d_tilde.unwrap();
        assert!((dt[0] - cq.d).abs() < 1e-14);
        assert!(dt[1].abs() < 1e-14 && dt[2].abs() < 1e-14);
    }

    #[test]
    fn validation_catches_bad_models() {
        struct BadMass;
        impl CLSDynamics for BadMass {
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
                vec![
                    S::one(),
                    S::zero(),
                    S::zero(),
                    S::constant(-1.0),
                ]
            }
            fn gap<S: Scalar>(&self, q: &[S]) -> S {
                q[1].clone()
            }
        }
        let report = validate_model(
            &CLSModel::new(BadMass),
            &[ModelSample {
                q: vec![0.0, 0.0],
                v: vec![0.0, 0.0],
                u: vec![],
            }],
        );
        assert!(!report.passed());

        struct TangentIsNormal;
        impl CLSDynamics for TangentIsNormal {
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
                q[1].clone()
            }
            fn tangents<S: Scalar>(&self, _q: &[S]) -> Vec<Vec<S>> {
                vec![vec![S::zero(), S::one()]]
            }
        }
        let report = validate_model(
            &CLSModel::new(TangentIsNormal).with_friction(0.5, 1),
            &[ModelSample {
                q: vec![0.0, 0.0],
                v: vec![0.0, 0.0],
                u: vec![],
            }],
        );
        assert!(!report.passed());

        let report = validate_model(
            &ball_friction(0.6),
            &[ModelSample {
                q: vec![0.0, 0.0],
                v: vec![1.0, -1.0],
                u: vec![0.0, 0.0],
            }],
        );
        assert!(report.passed(), "{:?}", report.issues);
    }
}
