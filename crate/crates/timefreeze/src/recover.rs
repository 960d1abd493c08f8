//! Maps clock-augmented trajectories back to physical-time solutions:
//! resampling against the clock state, extraction of impact records from
//! frozen-clock phases, impulse reconstruction, and contact-multiplier
//! paths along sustained-contact segments.

use crate::diffkit::solve_dense;
use crate::error::{Error, Result};
use crate::model::{CLSDynamics, CLSModel};
use crate::reform::{SystemKind, TimeFreezingSystem};
use crate::sim::{Control, ModeLabel, Trajectory};

/// One velocity jump in the physical-time solution.
#[derive(Clone, Debug)]
pub struct JumpRecord {
    /// Physical time of the impact.
    pub t_s: f64,
    /// Configuration at the impact (unchanged across it).
    pub q: Vec<f64>,
    pub v_pre: Vec<f64>,
    pub v_post: Vec<f64>,
    /// Normal impulse, from the momentum balance across the jump.
    pub impulse_n: f64,
    /// Tangential impulse components (with friction).
    pub impulse_t: Option<Vec<f64>>,
    /// Integration-time length of the frozen-clock phase.
    pub tau_span: f64,
    /// Speed-of-time factor active during the phase.
    pub speed: f64,
}

/// A solution of the original system in physical time: right-continuous
/// samples, explicit jump records, and sampled contact-multiplier paths.
#[derive(Clone, Debug, Default)]
pub struct PhysicalSolution {
    pub t_grid: Vec<f64>,
    /// Mechanical state (q, v) per grid point.
    pub x_samples: Vec<Vec<f64>>,
    pub jumps: Vec<JumpRecord>,
    /// Normal contact force per grid point (zero off contact).
    pub lambda_n: Vec<f64>,
    /// Friction force components per grid point (empty without friction).
    pub lambda_t: Vec<Vec<f64>>,
}

fn is_aux(mode: ModeLabel) -> bool {
    matches!(
        mode,
        ModeLabel::Aux | ModeLabel::AuxTangPlus | ModeLabel::AuxTangMinus
    )
}

/// Delassus scalar D = n^T M^{-1} n at a configuration.
fn delassus<D: CLSDynamics>(model: &CLSModel<D>, q: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = model.normal(q);
    let nq = q.len();
    let mut m = model.dynamics.mass(q);
    let mut w = n.clone();
    solve_dense(&mut m, &mut w, nq).map_err(|_| Error::SingularInertia)?;
    let d = n.iter().zip(&w).map(|(a, b)| a * b).sum();
    Ok((n, d))
}

/// Impulse components from the momentum balance M(q)(v_post - v_pre) =
/// [n B] Lambda, solved in the least-squares sense (exact when the contact
/// basis spans the velocity change, as the frozen-clock flow guarantees).
fn momentum_impulses<D: CLSDynamics>(
    model: &CLSModel<D>,
    q: &[f64],
    v_pre: &[f64],
    v_post: &[f64],
) -> Result<Vec<f64>> {
    let nq = q.len();
    let m = model.dynamics.mass(q);
    let mut p = vec![0.0; nq];
    for i in 0..nq {
        for j in 0..nq {
            p[i] += m[i * nq + j] * (v_post[j] - v_pre[j]);
        }
    }
    let mut basis = vec![model.normal(q)];
    basis.extend(model.dynamics.tangents(q));
    let k = basis.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
        }
        rhs[i] = basis[i].iter().zip(&p).map(|(a, b)| a * b).sum();
    }
    solve_dense(&mut gram, &mut rhs, k).map_err(|_| Error::SingularInertia)?;
    Ok(rhs)
}

/// Resample a clock-augmented trajectory against its clock state, dropping
/// the frozen-clock phases and emitting one jump record per phase. The
/// physical state is right-continuous at jump times and q is continuous
/// across them.
pub fn to_physical<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    traj: &Trajectory,
    ctrl: &dyn Control,
) -> Result<PhysicalSolution> {
    let nq = sys.n_q();
    let t_idx = 2 * nq;
    let n = traj.tau_grid.len();

    let (lam_n, lam_t) = multipliers_on_contact(sys, traj, ctrl)?;

    // Per-sample segment label; at shared boundary samples the later
    // segment wins, giving right-continuity after a transition.
    let mut labels = vec![ModeLabel::Unconstrained; n];
    for seg in &traj.segments {
        for l in labels
            .iter_mut()
            .take(seg.end_index + 1)
            .skip(seg.start_index)
        {
            *l = seg.mode;
        }
    }

    let mut sol = PhysicalSolution::default();
    for i in 0..n {
        if is_aux(labels[i]) && i + 1 < n && is_aux(labels[i + 1]) {
            continue; // interior of a frozen-clock phase
        }
        let y = &traj.y_samples[i];
        let t = y[t_idx];
        let x = y[..2 * nq].to_vec();
        if let Some(&t_last) = sol.t_grid.last() {
            if t <= t_last + 1e-12 {
                // Same physical time: keep the latest state (right limit).
                *sol.x_samples.last_mut().unwrap() = x;
                *sol.lambda_n.last_mut().unwrap() = lam_n[i];
                *sol.lambda_t.last_mut().unwrap() = lam_t[i].clone();
                continue;
            }
        }
        sol.t_grid.push(t);
        sol.x_samples.push(x);
        sol.lambda_n.push(lam_n[i]);
        sol.lambda_t.push(lam_t[i].clone());
    }

    // One jump record per maximal run of frozen-clock segments.
    let mut si = 0;
    while si < traj.segments.len() {
        if !is_aux(traj.segments[si].mode) {
            si += 1;
            continue;
        }
        let start = traj.segments[si].start_index;
        let mut end = traj.segments[si].end_index;
        while si + 1 < traj.segments.len() && is_aux(traj.segments[si + 1].mode) {
            si += 1;
            end = traj.segments[si].end_index;
        }
        si += 1;

        let y0 = &traj.y_samples[start];
        let y1 = &traj.y_samples[end];
        let q = y0[..nq].to_vec();
        let v_pre = y0[nq..2 * nq].to_vec();
        let v_post = y1[nq..2 * nq].to_vec();
        let lam = momentum_impulses(&sys.model, &q, &v_pre, &v_post)?;
        let impulse_t = if sys.kind == SystemKind::Frictionless {
            None
        } else {
            Some(lam[1..].to_vec())
        };
        let t_s = y0[t_idx];
        sol.jumps.push(JumpRecord {
            t_s,
            q,
            v_pre,
            v_post,
            impulse_n: lam[0],
            impulse_t,
            tau_span: traj.tau_grid[end] - traj.tau_grid[start],
            speed: ctrl.speed(t_s),
        });
    }
    Ok(sol)
}

/// Reconstruct the normal impulse of a jump from the frozen-clock phase
/// length and cross-check it against the closed form -n(q)^T v_pre / D(q).
/// A mismatch beyond 1e-6 flags an integrator fault. Returns the impulse
/// pair (normal, tangential components).
pub fn impulse<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    jump: &JumpRecord,
) -> Result<(f64, Option<Vec<f64>>)> {
    let integral = sys.a_n * jump.speed * jump.tau_span;
    let (n, d) = delassus(&sys.model, &jump.q)?;
    let nv: f64 = n.iter().zip(&jump.v_pre).map(|(a, b)| a * b).sum();
    let closed = -nv / d;
    if (integral - closed).abs() > 1e-6 {
        return Err(Error::ContractError(format!(
            "normal impulse mismatch: phase integral {integral:.9} vs closed form {closed:.9}"
        )));
    }
    if let Some(fr) = &sys.model.friction {
        if let Some(lt) = &jump.impulse_t {
            let mag: f64 = lt.iter().map(|x| x * x).sum::<f64>().sqrt();
            if mag > fr.mu * closed + 1e-8 {
                return Err(Error::ContractError(format!(
                    "tangential impulse {mag:.9} outside the friction cone (mu*Lambda_n = {:.9})",
                    fr.mu * closed
                )));
            }
        }
    }
    Ok((closed, jump.impulse_t.clone()))
}

/// Sampled contact-force paths along a trajectory: the normal force is
/// max(0, -phi/D) on sustained-contact segments and zero elsewhere; with
/// friction the tangential force opposes slip on the cone boundary, or
/// comes from the joint stick solve when the tangential velocity is zero.
pub fn multipliers_on_contact<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    traj: &Trajectory,
    ctrl: &dyn Control,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let model = &sys.model;
    let nq = sys.n_q();
    let t_idx = 2 * nq;
    let n = traj.tau_grid.len();
    let n_t = model.friction.as_ref().map_or(0, |f| f.n_t);
    let mut lam_n = vec![0.0; n];
    let mut lam_t = vec![vec![0.0; n_t]; n];

    for seg in &traj.segments {
        if seg.mode != ModeLabel::Sliding {
            continue;
        }
        for i in seg.start_index..=seg.end_index {
            let y = &traj.y_samples[i];
            let q = &y[..nq];
            let v = &y[nq..2 * nq];
            let u = ctrl.eval(y[t_idx]);
            match model.friction {
                None => {
                    let cq = model.contact_quantities(q, v, &u)?;
                    lam_n[i] = (-cq.phi / cq.d).max(0.0);
                }
                Some(ref fr) => {
                    let cq = model.contact_quantities(q, v, &u)?;
                    let vt = cq.v_t.as_ref().unwrap();
                    let vt_norm = vt.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if vt_norm > 1e-9 {
                        let l = (-cq.phi / cq.d).max(0.0);
                        lam_n[i] = l;
                        lam_t[i] = vt.iter().map(|x| -fr.mu * l * x / vt_norm).collect();
                    } else {
                        let lam = model.stick_multipliers(q, v, &u)?;
                        lam_n[i] = lam[0].max(0.0);
                        lam_t[i] = lam[1..].to_vec();
                    }
                }
            }
        }
    }
    Ok((lam_n, lam_t))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::PointMass2D;
    use crate::model::CLSModel;
    use crate::reform::{build, BuildOptions};
    use crate::sim::{simulate_event_driven, ConstControl, SimOptions};

    const G: f64 = 9.81;

    fn drop_solution(mu: Option<f64>, v1: f64, tau_f: f64) -> (TimeFreezingSystem<PointMass2D>, PhysicalSolution) {
        let mut model = CLSModel::new(PointMass2D { g: G });
        if let Some(mu) = mu {
            model = model.with_friction(mu, 1);
        }
        let sys = build(model, G, BuildOptions::default()).unwrap();
        let y0 = [0.0, 0.3, v1, 0.0, 0.0];
        let ctrl = ConstControl(vec![0.0, 0.0]);
        let traj =
            simulate_event_driven(&sys, &y0, &ctrl, tau_f, &SimOptions::default()).unwrap();
        let sol = to_physical(&sys, &traj, &ctrl).unwrap();
        (sys, sol)
    }

    #[test]
    fn drop_jump_record_and_impulse_identity() {
        let (sys, sol) = drop_solution(None, 1.0, 1.2);
        assert_eq!(sol.jumps.len(), 1);
        let j = &sol.jumps[0];
        let v_imp = (2.0 * G * 0.3).sqrt();
        let t_imp = (2.0 * 0.3 / G).sqrt();
        assert!((j.t_s - t_imp).abs() < 1e-6);
        assert!((j.v_pre[1] + v_imp).abs() < 1e-6);
        assert!(j.v_post[1].abs() < 1e-8, "post-jump normal velocity");
        assert!(j.q[1].abs() < 1e-6, "configuration at the surface");
        // Unit mass, flat ground: normal impulse equals the speed killed.
        assert!((j.impulse_n - v_imp).abs() < 1e-8);
        let (l_n, l_t) = impulse(&sys, j).unwrap();
        assert!((l_n - j.impulse_n).abs() < 1e-8);
        assert!(l_t.is_none());
    }

    #[test]
    fn drop_physical_grid_is_strictly_increasing() {
        let (_, sol) = drop_solution(None, 1.0, 1.2);
        for w in sol.t_grid.windows(2) {
            assert!(w[1] > w[0], "duplicate physical times survived: {w:?}");
        }
        // The frozen-clock phase collapsed: velocity is discontinuous in
        // physical time right at the impact sample.
        let j = &sol.jumps[0];
        let k = sol
            .t_grid
            .iter()
            .position(|&t| (t - j.t_s).abs() < 1e-9)
            .expect("impact time on the grid");
        assert!((sol.x_samples[k][3] - j.v_post[1]).abs() < 1e-9, "right-continuity");
        assert!(sol.x_samples[k - 1][3] < -2.0, "pre-impact sample falls fast");
    }

    #[test]
    fn drop_contact_force_balances_gravity() {
        let (_, sol) = drop_solution(None, 1.0, 1.2);
        // Final samples slide on the surface under zero control: the
        // normal force balances gravity exactly.
        let l = *sol.lambda_n.last().unwrap();
        assert!((l - G).abs() < 1e-7, "normal force {l}");
        // Off contact the force is zero.
        assert_eq!(sol.lambda_n[0], 0.0);
    }

    #[test]
    fn free_flight_resampling_is_bijective() {
        let model = CLSModel::new(PointMass2D { g: G });
        let sys = build(model, G, BuildOptions::default()).unwrap();
        let y0 = [0.0, 10.0, 1.0, 0.0, 0.0];
        let ctrl = ConstControl(vec![0.0, 0.0]);
        let traj = simulate_event_driven(&sys, &y0, &ctrl, 0.5, &SimOptions::default()).unwrap();
        let sol = to_physical(&sys, &traj, &ctrl).unwrap();
        assert!(sol.jumps.is_empty());
        assert_eq!(sol.t_grid.len(), traj.tau_grid.len());
        for (i, t) in sol.t_grid.iter().enumerate() {
            assert!((t - traj.tau_grid[i]).abs() < 1e-12);
            assert_eq!(sol.x_samples[i], traj.y_samples[i][..4].to_vec());
            assert_eq!(sol.lambda_n[i], 0.0);
        }
    }

    #[test]
    fn frictional_drop_impulse_and_cone() {
        let mu = 0.6;
        let (sys, sol) = drop_solution(Some(mu), 2.0, 1.2);
        assert_eq!(sol.jumps.len(), 1);
        let j = &sol.jumps[0];
        let v_imp = (2.0 * G * 0.3).sqrt();
        // Tangential slow-down proportional to the normal speed killed.
        assert!((j.v_post[0] - (2.0 - mu * v_imp)).abs() < 1e-6, "{}", j.v_post[0]);
        let lt = j.impulse_t.as_ref().unwrap();
        assert!((lt[0].abs() - mu * j.impulse_n).abs() < 1e-8);
        assert!(lt[0] < 0.0, "friction impulse opposes forward slip");
        let (l_n, _) = impulse(&sys, j).unwrap();
        assert!((l_n - j.impulse_n).abs() < 1e-8);
        // Friction-cone feasibility along the whole contact path.
        for (ln, lt) in sol.lambda_n.iter().zip(&sol.lambda_t) {
            let mag = lt.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(mag <= mu * ln + 1e-8, "cone violated: |{mag}| > {}", mu * ln);
        }
    }

    #[test]
    fn impulse_flags_corrupted_jump() {
        let (sys, sol) = drop_solution(None, 1.0, 1.2);
        let mut j = sol.jumps[0].clone();
        j.tau_span *= 1.5;
        assert!(matches!(impulse(&sys, &j), Err(Error::ContractError(_))));
    }
}
