//! Optimal control over the clock-augmented system: multiple-shooting
//! transcription of the continuous problem into a mathematical program
//! with complementarity constraints (MPCC), a relaxation homotopy solved
//! by the nlp module, and recovery of the physical-time control signal.
//!
//! Each control interval carries a piecewise-constant control u_k and a
//! speed-of-time factor s_k scaling the whole right-hand side; clock
//! equalities pin the physical time at the shooting nodes to the
//! equidistant grid k T / N. Element lengths inside each interval are
//! decision variables so the discretization can land element boundaries
//! exactly on mode switches; complementarity is imposed across all stage
//! pairs within an element, which forbids switching in an element
//! interior.

use std::sync::Arc;

use crate::diffkit::{gradient, jacobian, Dual, Scalar};
use crate::error::{Error, Result};
use crate::model::CLSDynamics;
use crate::recover::{to_physical, PhysicalSolution};
use crate::reform::{build_dcs, DCSystem, TimeFreezingSystem};
use crate::sim::{radau_iia, simulate_event_driven, GridControl, RadauTableau, SimOptions, Trajectory};

// ---------------------------------------------------------------------------
// Problem definition

/// Running and terminal cost, evaluable at any scalar type so the
/// transcription can differentiate through it.
pub trait OcpCost: Send + Sync + 'static {
    fn stage<S: Scalar>(&self, x: &[S], u: &[S]) -> S;
    fn terminal<S: Scalar>(&self, _x: &[S]) -> S {
        S::zero()
    }
}

/// Path and terminal constraints (inequalities are >= 0).
pub trait OcpConstraints: Send + Sync + 'static {
    fn path<S: Scalar>(&self, _x: &[S], _u: &[S]) -> Vec<S> {
        Vec::new()
    }
    fn terminal_ineq<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        Vec::new()
    }
    fn terminal_eq<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        Vec::new()
    }
}

/// No running cost, no constraints.
pub struct NoCost;
impl OcpCost for NoCost {
    fn stage<S: Scalar>(&self, _x: &[S], _u: &[S]) -> S {
        S::zero()
    }
}
pub struct NoConstraints;
impl OcpConstraints for NoConstraints {}

pub struct OCPDefinition<D: CLSDynamics, C: OcpCost, G: OcpConstraints> {
    pub sys: Arc<TimeFreezingSystem<D>>,
    /// Physical horizon T.
    pub t_phys: f64,
    /// Integration-time horizon (defaults to T).
    pub t_num: f64,
    /// Number of control intervals N.
    pub n_ctrl: usize,
    pub cost: C,
    pub cons: G,
    /// Initial mechanical state (q, v).
    pub x0: Vec<f64>,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    /// Upper bound on the speed-of-time variables (lower bound is 1).
    pub s_max: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RkOpts {
    pub n_stages: usize,
    pub n_elements: usize,
}

impl Default for RkOpts {
    fn default() -> Self {
        RkOpts {
            n_stages: 3,
            n_elements: 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Transcription

/// One relaxed complementarity product in aggregated (sum) form:
/// (sum over the step variables, or their complements) times (sum over
/// the multiplier variables) <= sigma. With all terms nonnegative this
/// bounds every individual product, and unlike all-pairs products it
/// does not create redundant active constraints when every stage of an
/// element sits in the same mode.
#[derive(Clone, Debug)]
pub struct CompPair {
    pub steps: Vec<usize>,
    /// Use (1 - alpha) for the step terms.
    pub complement: bool,
    pub mults: Vec<usize>,
}

impl CompPair {
    fn sides(&self, w: &[f64]) -> (f64, f64) {
        let a: f64 = self
            .steps
            .iter()
            .map(|&i| if self.complement { 1.0 - w[i] } else { w[i] })
            .sum();
        let b: f64 = self.mults.iter().map(|&i| w[i]).sum();
        (a, b)
    }
}

#[derive(Clone, Debug)]
enum EqKind {
    /// yq_0 - (x0, 0, 0).
    Init,
    /// Collocation rows of element (k, i).
    Colloc { k: usize, i: usize },
    /// Stage-local algebraic rows of stage (k, i, m).
    Alg { k: usize, i: usize, m: usize },
    /// Node k+1 minus the end of interval k's last element.
    Continuity { k: usize },
    /// Element lengths of interval k sum to T_num / N.
    HSum { k: usize },
    /// Clock at node k equals k T / N.
    Clock { k: usize },
    /// Pinned control component (equal lower and upper bound).
    FixU { k: usize, iu: usize },
    TerminalEq,
}

#[derive(Clone, Debug)]
struct EqBlock {
    kind: EqKind,
    row0: usize,
    n_rows: usize,
}

pub struct MPCCProblem<D: CLSDynamics, C: OcpCost, G: OcpConstraints> {
    pub ocp: OCPDefinition<D, C, G>,
    pub dcs: DCSystem<D>,
    tab: RadauTableau,
    pub n_el: usize,
    pub n_w: usize,
    n_eq: usize,
    eq_blocks: Vec<EqBlock>,
    pub comp_pairs: Vec<CompPair>,
    n_path: usize,
    n_term_ineq: usize,
    lb: Vec<f64>,
    ub: Vec<f64>,
    fixed_u: Vec<usize>,
}

/// Build the discrete MPCC for an optimal control problem. Fails with
/// `InfeasibleClock` when the speed bound cannot stretch the integration
/// horizon to the physical horizon.
pub fn transcribe<D: CLSDynamics, C: OcpCost, G: OcpConstraints>(
    ocp: OCPDefinition<D, C, G>,
    rk: RkOpts,
) -> Result<MPCCProblem<D, C, G>> {
    if ocp.s_max * ocp.t_num < ocp.t_phys {
        return Err(Error::InfeasibleClock);
    }
    let dcs = build_dcs(ocp.sys.clone());
    let tab = radau_iia(rk.n_stages);
    let sys = &ocp.sys;
    let (n_y, n_f, n_c) = (sys.n_y, dcs.n_f, dcs.n_c);
    let n_yq = n_y + 1;
    let n_z = dcs.n_z();
    let n_u = sys.model.n_u();
    let (n_el, ns, n_ctrl) = (rk.n_elements, rk.n_stages, ocp.n_ctrl);

    let ibs = n_u + 1 + n_el * (1 + ns * (n_yq + n_z));
    let n_w = n_ctrl * (n_yq + ibs) + n_yq;

    // Fixed control components become equalities instead of empty-interior
    // bound pairs.
    let fixed_u: Vec<usize> = (0..n_u).filter(|&i| ocp.u_lb[i] == ocp.u_ub[i]).collect();

    let mut blocks = Vec::new();
    let mut row = 0usize;
    let mut push = |blocks: &mut Vec<EqBlock>, kind: EqKind, rows: usize| {
        blocks.push(EqBlock {
            kind,
            row0: row,
            n_rows: rows,
        });
        row += rows;
    };
    push(&mut blocks, EqKind::Init, n_yq);
    for k in 0..n_ctrl {
        for i in 0..n_el {
            push(&mut blocks, EqKind::Colloc { k, i }, ns * n_yq);
            for m in 0..ns {
                push(&mut blocks, EqKind::Alg { k, i, m }, n_f + n_c);
            }
        }
        push(&mut blocks, EqKind::Continuity { k }, n_yq);
        push(&mut blocks, EqKind::HSum { k }, 1);
        push(&mut blocks, EqKind::Clock { k: k + 1 }, 1);
        for &iu in &fixed_u {
            push(&mut blocks, EqKind::FixU { k, iu }, 1);
        }
    }
    let n_term_eq = ocp.cons.terminal_eq(&ocp.x0).len();
    if n_term_eq > 0 {
        push(&mut blocks, EqKind::TerminalEq, n_term_eq);
    }
    let n_eq = row;

    let n_path = ocp.cons.path(&ocp.x0, &vec![0.0; n_u]).len();
    let n_term_ineq = ocp.cons.terminal_ineq(&ocp.x0).len();

    let mut p = MPCCProblem {
        ocp,
        dcs,
        tab,
        n_el,
        n_w,
        n_eq,
        eq_blocks: blocks,
        comp_pairs: Vec::new(),
        n_path,
        n_term_ineq,
        lb: vec![f64::NEG_INFINITY; n_w],
        ub: vec![f64::INFINITY; n_w],
        fixed_u,
    };

    // Bounds and complementarity pairs.
    for k in 0..n_ctrl {
        let off_u = p.off_u(k);
        let off_s = p.off_s(k);
        for iu in 0..n_u {
            if p.fixed_u.contains(&iu) {
                continue;
            }
            p.lb[off_u + iu] = p.ocp.u_lb[iu];
            p.ub[off_u + iu] = p.ocp.u_ub[iu];
        }
        p.lb[off_s] = 1.0;
        p.ub[off_s] = p.ocp.s_max;
        for i in 0..n_el {
            let off_h = p.off_h(k, i);
            p.lb[off_h] = 0.0;
            for m in 0..ns {
                let z0 = p.off_sz(k, i, m);
                for j in 0..n_f {
                    p.lb[z0 + j] = 0.0;
                }
                for j in 0..n_c {
                    p.lb[z0 + n_f + j] = 0.0;
                    p.ub[z0 + n_f + j] = 1.0;
                    p.lb[z0 + n_f + n_c + j] = 0.0;
                    p.lb[z0 + n_f + 2 * n_c + j] = 0.0;
                }
            }
            // Cross-complementarity over the whole element: switching
            // may only happen at element boundaries.
            for j in 0..n_c {
                let steps: Vec<usize> = (0..ns).map(|m| p.off_sz(k, i, m) + n_f + j).collect();
                let lns: Vec<usize> =
                    (0..ns).map(|m| p.off_sz(k, i, m) + n_f + 2 * n_c + j).collect();
                let lps: Vec<usize> =
                    (0..ns).map(|m| p.off_sz(k, i, m) + n_f + n_c + j).collect();
                p.comp_pairs.push(CompPair {
                    steps: steps.clone(),
                    complement: false,
                    mults: lns,
                });
                p.comp_pairs.push(CompPair {
                    steps,
                    complement: true,
                    mults: lps,
                });
            }
        }
    }
    Ok(p)
}

impl<D: CLSDynamics, C: OcpCost, G: OcpConstraints> MPCCProblem<D, C, G> {
    fn n_yq(&self) -> usize {
        self.ocp.sys.n_y + 1
    }
    fn n_z(&self) -> usize {
        self.dcs.n_z()
    }
    fn n_u(&self) -> usize {
        self.ocp.sys.model.n_u()
    }
    fn ibs(&self) -> usize {
        self.n_u() + 1 + self.n_el * (1 + self.tab.s * (self.n_yq() + self.n_z()))
    }
    pub fn off_node(&self, k: usize) -> usize {
        k * (self.n_yq() + self.ibs())
    }
    pub fn off_u(&self, k: usize) -> usize {
        self.off_node(k) + self.n_yq()
    }
    pub fn off_s(&self, k: usize) -> usize {
        self.off_u(k) + self.n_u()
    }
    pub fn off_h(&self, k: usize, i: usize) -> usize {
        self.off_s(k) + 1 + i * (1 + self.tab.s * (self.n_yq() + self.n_z()))
    }
    pub fn off_sy(&self, k: usize, i: usize, m: usize) -> usize {
        self.off_h(k, i) + 1 + m * (self.n_yq() + self.n_z())
    }
    pub fn off_sz(&self, k: usize, i: usize, m: usize) -> usize {
        self.off_sy(k, i, m) + self.n_yq()
    }
    /// Start of the state the element (k, i) integrates from.
    fn off_prev(&self, k: usize, i: usize) -> usize {
        if i == 0 {
            self.off_node(k)
        } else {
            self.off_sy(k, i - 1, self.tab.s - 1)
        }
    }

    pub fn node_state<'a>(&self, w: &'a [f64], k: usize) -> &'a [f64] {
        &w[self.off_node(k)..self.off_node(k) + self.n_yq()]
    }
    pub fn control(&self, w: &[f64], k: usize) -> Vec<f64> {
        w[self.off_u(k)..self.off_u(k) + self.n_u()].to_vec()
    }
    pub fn speed(&self, w: &[f64], k: usize) -> f64 {
        w[self.off_s(k)]
    }
    /// Accumulated running cost at the final node.
    pub fn quadrature(&self, w: &[f64]) -> f64 {
        w[self.off_node(self.ocp.n_ctrl) + self.n_yq() - 1]
    }

    /// Augmented stage right-hand side: s * (F theta, theta_1 L).
    fn stage_f<S: Scalar>(&self, yq: &[S], z: &[S], u: &[S], s: &S) -> Vec<S> {
        let n_y = self.ocp.sys.n_y;
        let n_x = n_y - 1;
        let y = &yq[..n_y];
        let theta = &z[..self.dcs.n_f];
        let mut f = self
            .dcs
            .ode_rhs(y, u, theta)
            .expect("stage dynamics evaluation failed");
        let gate = theta[0].clone() * self.ocp.cost.stage(&y[..n_x], u);
        f.push(gate);
        f.iter().map(|fi| fi.clone() * s.clone()).collect()
    }

    /// Stage-local algebraic residual: mode weights from the step
    /// variables, and the link between switching functions and their
    /// multiplier pairs.
    fn alg_rows<S: Scalar>(&self, yq: &[S], z: &[S]) -> Vec<S> {
        let n_y = self.ocp.sys.n_y;
        let (theta, alpha, lp, ln_) = self.dcs.split_z(z);
        let mut rows = self.dcs.g_f(theta, alpha);
        rows.extend(self.dcs.switch_link(&yq[..n_y], lp, ln_));
        rows
    }

    // -- Equality residuals ------------------------------------------------

    fn eval_eq(&self, w: &[f64]) -> Vec<f64> {
        let n_yq = self.n_yq();
        let n_z = self.n_z();
        let n_u = self.n_u();
        let ns = self.tab.s;
        let mut out = vec![0.0; self.n_eq];
        for b in &self.eq_blocks {
            let r = &mut out[b.row0..b.row0 + b.n_rows];
            match b.kind {
                EqKind::Init => {
                    let yq = self.node_state(w, 0);
                    let n_x = n_yq - 2;
                    for j in 0..n_x {
                        r[j] = yq[j] - self.ocp.x0[j];
                    }
                    r[n_x] = yq[n_x]; // clock starts at zero
                    r[n_x + 1] = yq[n_x + 1]; // empty quadrature
                }
                EqKind::Colloc { k, i } => {
                    let prev = &w[self.off_prev(k, i)..self.off_prev(k, i) + n_yq];
                    let h = w[self.off_h(k, i)];
                    let u = &w[self.off_u(k)..self.off_u(k) + n_u];
                    let s = w[self.off_s(k)];
                    let fs: Vec<Vec<f64>> = (0..ns)
                        .map(|m| {
                            let yq = &w[self.off_sy(k, i, m)..self.off_sy(k, i, m) + n_yq];
                            let z = &w[self.off_sz(k, i, m)..self.off_sz(k, i, m) + n_z];
                            self.stage_f(yq, z, u, &s)
                        })
                        .collect();
                    for mi in 0..ns {
                        let yq = &w[self.off_sy(k, i, mi)..self.off_sy(k, i, mi) + n_yq];
                        for jr in 0..n_yq {
                            let mut acc = yq[jr] - prev[jr];
                            for (m, fm) in fs.iter().enumerate() {
                                acc -= h * self.tab.a[mi * ns + m] * fm[jr];
                            }
                            r[mi * n_yq + jr] = acc;
                        }
                    }
                }
                EqKind::Alg { k, i, m } => {
                    let yq = &w[self.off_sy(k, i, m)..self.off_sy(k, i, m) + n_yq];
                    let z = &w[self.off_sz(k, i, m)..self.off_sz(k, i, m) + n_z];
                    r.copy_from_slice(&self.alg_rows(yq, z));
                }
                EqKind::Continuity { k } => {
                    let node = self.node_state(w, k + 1);
                    let last = self.off_sy(k, self.n_el - 1, ns - 1);
                    for j in 0..n_yq {
                        r[j] = node[j] - w[last + j];
                    }
                }
                EqKind::HSum { k } => {
                    let mut acc = -self.ocp.t_num / self.ocp.n_ctrl as f64;
                    for i in 0..self.n_el {
                        acc += w[self.off_h(k, i)];
                    }
                    r[0] = acc;
                }
                EqKind::Clock { k } => {
                    let t = self.node_state(w, k)[n_yq - 2];
                    r[0] = t - k as f64 * self.ocp.t_phys / self.ocp.n_ctrl as f64;
                }
                EqKind::FixU { k, iu } => {
                    r[0] = w[self.off_u(k) + iu] - self.ocp.u_lb[iu];
                }
                EqKind::TerminalEq => {
                    let x = &self.node_state(w, self.ocp.n_ctrl)[..n_yq - 2];
                    r.copy_from_slice(&self.ocp.cons.terminal_eq(x));
                }
            }
        }
        out
    }

    fn eval_eq_jac(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let n_yq = self.n_yq();
        let n_z = self.n_z();
        let n_u = self.n_u();
        let ns = self.tab.s;
        let n = self.n_w;
        let mut rows = vec![vec![0.0; n]; self.n_eq];
        for b in &self.eq_blocks {
            match b.kind {
                EqKind::Init => {
                    for j in 0..n_yq {
                        rows[b.row0 + j][self.off_node(0) + j] = 1.0;
                    }
                }
                EqKind::Colloc { k, i } => {
                    let prev0 = self.off_prev(k, i);
                    let h_idx = self.off_h(k, i);
                    let u0 = self.off_u(k);
                    let s_idx = self.off_s(k);
                    let h = w[h_idx];
                    // Per-stage values and local Jacobians in
                    // (yq, z, u, s).
                    let w_loc = n_yq + n_z + n_u + 1;
                    let mut f_vals = Vec::with_capacity(ns);
                    let mut f_jacs = Vec::with_capacity(ns);
                    for m in 0..ns {
                        let mut xl = Vec::with_capacity(w_loc);
                        xl.extend_from_slice(
                            &w[self.off_sy(k, i, m)..self.off_sy(k, i, m) + n_yq + n_z],
                        );
                        xl.extend_from_slice(&w[u0..u0 + n_u]);
                        xl.push(w[s_idx]);
                        let jac = jacobian(
                            |xd: &[Dual<f64>]| {
                                self.stage_f(
                                    &xd[..n_yq],
                                    &xd[n_yq..n_yq + n_z],
                                    &xd[n_yq + n_z..n_yq + n_z + n_u],
                                    &xd[w_loc - 1],
                                )
                            },
                            &xl,
                        );
                        let yq = &w[self.off_sy(k, i, m)..self.off_sy(k, i, m) + n_yq];
                        let z = &w[self.off_sz(k, i, m)..self.off_sz(k, i, m) + n_z];
                        f_vals.push(self.stage_f(yq, z, &w[u0..u0 + n_u], &w[s_idx]));
                        f_jacs.push(jac);
                    }
                    for mi in 0..ns {
                        for jr in 0..n_yq {
                            let row = &mut rows[b.row0 + mi * n_yq + jr];
                            row[self.off_sy(k, i, mi) + jr] += 1.0;
                            row[prev0 + jr] -= 1.0;
                            for m in 0..ns {
                                let a = self.tab.a[mi * ns + m];
                                row[h_idx] -= a * f_vals[m][jr];
                                let jm = &f_jacs[m][jr];
                                let sy = self.off_sy(k, i, m);
                                for c in 0..n_yq + n_z {
                                    row[sy + c] -= h * a * jm[c];
                                }
                                for c in 0..n_u {
                                    row[u0 + c] -= h * a * jm[n_yq + n_z + c];
                                }
                                row[s_idx] -= h * a * jm[w_loc - 1];
                            }
                        }
                    }
                }
                EqKind::Alg { k, i, m } => {
                    let sy = self.off_sy(k, i, m);
                    let xl = &w[sy..sy + n_yq + n_z];
                    let jac = jacobian(
                        |xd: &[Dual<f64>]| self.alg_rows(&xd[..n_yq], &xd[n_yq..]),
                        xl,
                    );
                    for (jr, jrow) in jac.iter().enumerate() {
                        for (c, &v) in jrow.iter().enumerate() {
                            rows[b.row0 + jr][sy + c] = v;
                        }
                    }
                }
                EqKind::Continuity { k } => {
                    let last = self.off_sy(k, self.n_el - 1, ns - 1);
                    for j in 0..n_yq {
                        rows[b.row0 + j][self.off_node(k + 1) + j] = 1.0;
                        rows[b.row0 + j][last + j] = -1.0;
                    }
                }
                EqKind::HSum { k } => {
                    for i in 0..self.n_el {
                        rows[b.row0][self.off_h(k, i)] = 1.0;
                    }
                }
                EqKind::Clock { k } => {
                    rows[b.row0][self.off_node(k) + n_yq - 2] = 1.0;
                }
                EqKind::FixU { k, iu } => {
                    rows[b.row0][self.off_u(k) + iu] = 1.0;
                }
                EqKind::TerminalEq => {
                    let x0 = self.off_node(self.ocp.n_ctrl);
                    let n_x = n_yq - 2;
                    let jac = jacobian(
                        |xd: &[Dual<f64>]| self.ocp.cons.terminal_eq(xd),
                        &w[x0..x0 + n_x],
                    );
                    for (jr, jrow) in jac.iter().enumerate() {
                        for (c, &v) in jrow.iter().enumerate() {
                            rows[b.row0 + jr][x0 + c] = v;
                        }
                    }
                }
            }
        }
        rows
    }

    // -- Inequalities: relaxed complementarity, then path, then terminal --

    fn n_ineq(&self) -> usize {
        self.comp_pairs.len() + self.n_path * self.ocp.n_ctrl + self.n_term_ineq
    }

    fn eval_ineq(&self, w: &[f64], sigma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_ineq());
        for pair in &self.comp_pairs {
            let (a, b) = pair.sides(w);
            out.push(sigma - a * b);
        }
        let n_x = self.n_yq() - 2;
        for k in 0..self.ocp.n_ctrl {
            if self.n_path == 0 {
                continue;
            }
            let x = &self.node_state(w, k)[..n_x];
            let u = &w[self.off_u(k)..self.off_u(k) + self.n_u()];
            out.extend(self.ocp.cons.path(x, u));
        }
        if self.n_term_ineq > 0 {
            let x = &self.node_state(w, self.ocp.n_ctrl)[..n_x];
            out.extend(self.ocp.cons.terminal_ineq(x));
        }
        out
    }

    fn eval_ineq_jac(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_w;
        let mut rows = Vec::with_capacity(self.n_ineq());
        for pair in &self.comp_pairs {
            let (a, b) = pair.sides(w);
            let mut row = vec![0.0; n];
            let sgn = if pair.complement { 1.0 } else { -1.0 };
            for &ai in &pair.steps {
                row[ai] += sgn * b;
            }
            for &bi in &pair.mults {
                row[bi] -= a;
            }
            rows.push(row);
        }
        let n_x = self.n_yq() - 2;
        let n_u = self.n_u();
        for k in 0..self.ocp.n_ctrl {
            if self.n_path == 0 {
                continue;
            }
            let x0 = self.off_node(k);
            let u0 = self.off_u(k);
            let mut xl = w[x0..x0 + n_x].to_vec();
            xl.extend_from_slice(&w[u0..u0 + n_u]);
            let jac = jacobian(
                |xd: &[Dual<f64>]| self.ocp.cons.path(&xd[..n_x], &xd[n_x..]),
                &xl,
            );
            for jrow in jac {
                let mut row = vec![0.0; n];
                for c in 0..n_x {
                    row[x0 + c] = jrow[c];
                }
                for c in 0..n_u {
                    row[u0 + c] = jrow[n_x + c];
                }
                rows.push(row);
            }
        }
        if self.n_term_ineq > 0 {
            let x0 = self.off_node(self.ocp.n_ctrl);
            let jac = jacobian(
                |xd: &[Dual<f64>]| self.ocp.cons.terminal_ineq(xd),
                &w[x0..x0 + n_x],
            );
            for jrow in jac {
                let mut row = vec![0.0; n];
                for (c, &v) in jrow.iter().enumerate() {
                    row[x0 + c] = v;
                }
                rows.push(row);
            }
        }
        rows
    }

    // -- Objective ---------------------------------------------------------

    fn eval_obj(&self, w: &[f64]) -> f64 {
        let n_x = self.n_yq() - 2;
        let x = &self.node_state(w, self.ocp.n_ctrl)[..n_x];
        self.quadrature(w) + self.ocp.cost.terminal(x)
    }

    fn eval_obj_grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_w];
        let n_x = self.n_yq() - 2;
        let x0 = self.off_node(self.ocp.n_ctrl);
        g[x0 + self.n_yq() - 1] = 1.0;
        let gx = gradient(
            |xd: &[Dual<f64>]| self.ocp.cost.terminal(xd),
            &w[x0..x0 + n_x],
        );
        for (c, v) in gx.into_iter().enumerate() {
            g[x0 + c] += v;
        }
        g
    }

    // -- Lagrangian Hessian (exact, assembled blockwise) --------------------

    fn eval_lag_hessian(&self, w: &[f64], lam: &[f64], z: &[f64]) -> Vec<f64> {
        let n = self.n_w;
        let n_yq = self.n_yq();
        let n_z = self.n_z();
        let n_u = self.n_u();
        let ns = self.tab.s;
        let mut hmat = vec![0.0; n * n];

        // Hessian of a multiplier-weighted residual over its local
        // variables, via one more dual level.
        fn local_hess<F>(f: F, x: &[f64]) -> Vec<Vec<f64>>
        where
            F: Fn(&[Dual<Dual<f64>>]) -> Dual<Dual<f64>>,
        {
            jacobian(
                |xd: &[Dual<f64>]| gradient(|xdd: &[Dual<Dual<f64>>]| f(xdd), xd),
                x,
            )
        }

        for b in &self.eq_blocks {
            match b.kind {
                EqKind::Colloc { k, i } => {
                    // lambda^T rows = linear terms
                    //   - h sum_m (sum_mi lambda a[mi][m])^T f_m,
                    // so per stage m: scatter -(-h H(phi_m)) and the h
                    // cross-gradients.
                    let h_idx = self.off_h(k, i);
                    let u0 = self.off_u(k);
                    let s_idx = self.off_s(k);
                    let h = w[h_idx];
                    let w_loc = n_yq + n_z + n_u + 1;
                    for m in 0..ns {
                        let vm: Vec<f64> = (0..n_yq)
                            .map(|r| {
                                (0..ns)
                                    .map(|mi| {
                                        lam[b.row0 + mi * n_yq + r] * self.tab.a[mi * ns + m]
                                    })
                                    .sum()
                            })
                            .collect();
                        if vm.iter().all(|v| v.abs() < 1e-300) {
                            continue;
                        }
                        let mut xl = Vec::with_capacity(w_loc);
                        xl.extend_from_slice(
                            &w[self.off_sy(k, i, m)..self.off_sy(k, i, m) + n_yq + n_z],
                        );
                        xl.extend_from_slice(&w[u0..u0 + n_u]);
                        xl.push(w[s_idx]);
                        let phi = |xd: &[Dual<Dual<f64>>]| -> Dual<Dual<f64>> {
                            let f = self.stage_f(
                                &xd[..n_yq],
                                &xd[n_yq..n_yq + n_z],
                                &xd[n_yq + n_z..n_yq + n_z + n_u],
                                &xd[w_loc - 1],
                            );
                            let mut acc = Dual::constant(0.0);
                            for (fi, &vi) in f.iter().zip(&vm) {
                                acc = acc + fi.clone().scale(vi);
                            }
                            acc
                        };
                        let gm = gradient(
                            |xd: &[Dual<f64>]| {
                                let f = self.stage_f(
                                    &xd[..n_yq],
                                    &xd[n_yq..n_yq + n_z],
                                    &xd[n_yq + n_z..n_yq + n_z + n_u],
                                    &xd[w_loc - 1],
                                );
                                let mut acc = Dual::constant(0.0);
                                for (fi, &vi) in f.iter().zip(&vm) {
                                    acc = acc + fi.clone().scale(vi);
                                }
                                acc
                            },
                            &xl,
                        );
                        let hm = local_hess(phi, &xl);
                        // Map local index -> global column.
                        let glob = |c: usize| -> usize {
                            if c < n_yq + n_z {
                                self.off_sy(k, i, m) + c
                            } else if c < n_yq + n_z + n_u {
                                u0 + (c - n_yq - n_z)
                            } else {
                                s_idx
                            }
                        };
                        for a in 0..w_loc {
                            let ga = glob(a);
                            hmat[ga * n + h_idx] += gm[a];
                            hmat[h_idx * n + ga] += gm[a];
                            for bb in 0..w_loc {
                                hmat[ga * n + glob(bb)] += h * hm[a][bb];
                            }
                        }
                    }
                }
                EqKind::Alg { k, i, m } => {
                    let sy = self.off_sy(k, i, m);
                    let xl = &w[sy..sy + n_yq + n_z];
                    let lam_b = &lam[b.row0..b.row0 + b.n_rows];
                    if lam_b.iter().all(|v| v.abs() < 1e-300) {
                        continue;
                    }
                    let hm = local_hess(
                        |xd: &[Dual<Dual<f64>>]| {
                            let rws = self.alg_rows(&xd[..n_yq], &xd[n_yq..]);
                            let mut acc = Dual::constant(0.0);
                            for (ri, &li) in rws.iter().zip(lam_b) {
                                acc = acc + ri.clone().scale(li);
                            }
                            acc
                        },
                        xl,
                    );
                    for a in 0..xl.len() {
                        for bb in 0..xl.len() {
                            hmat[(sy + a) * n + (sy + bb)] -= hm[a][bb];
                        }
                    }
                }
                EqKind::TerminalEq => {
                    let x0 = self.off_node(self.ocp.n_ctrl);
                    let n_x = n_yq - 2;
                    let lam_b = &lam[b.row0..b.row0 + b.n_rows];
                    let hm = local_hess(
                        |xd: &[Dual<Dual<f64>>]| {
                            let rws = self.ocp.cons.terminal_eq(xd);
                            let mut acc = Dual::constant(0.0);
                            for (ri, &li) in rws.iter().zip(lam_b) {
                                acc = acc + ri.clone().scale(li);
                            }
                            acc
                        },
                        &w[x0..x0 + n_x],
                    );
                    for a in 0..n_x {
                        for bb in 0..n_x {
                            hmat[(x0 + a) * n + (x0 + bb)] -= hm[a][bb];
                        }
                    }
                }
                _ => {} // linear blocks have no curvature
            }
        }

        // Relaxed complementarity rows (bilinear, analytic curvature of
        // -z^T c_I).
        for (r, pair) in self.comp_pairs.iter().enumerate() {
            let zr = if pair.complement { -z[r] } else { z[r] };
            for &ai in &pair.steps {
                for &bi in &pair.mults {
                    hmat[ai * n + bi] += zr;
                    hmat[bi * n + ai] += zr;
                }
            }
        }

        // Path / terminal inequalities and the terminal cost.
        let n_x = n_yq - 2;
        let mut zr = self.comp_pairs.len();
        for k in 0..self.ocp.n_ctrl {
            if self.n_path == 0 {
                continue;
            }
            let x0 = self.off_node(k);
            let u0 = self.off_u(k);
            let zb = &z[zr..zr + self.n_path];
            zr += self.n_path;
            if zb.iter().all(|v| v.abs() < 1e-300) {
                continue;
            }
            let mut xl = w[x0..x0 + n_x].to_vec();
            xl.extend_from_slice(&w[u0..u0 + n_u]);
            let hm = local_hess(
                |xd: &[Dual<Dual<f64>>]| {
                    let rws = self.ocp.cons.path(&xd[..n_x], &xd[n_x..]);
                    let mut acc = Dual::constant(0.0);
                    for (ri, &zi) in rws.iter().zip(zb) {
                        acc = acc + ri.clone().scale(zi);
                    }
                    acc
                },
                &xl,
            );
            let glob = |c: usize| if c < n_x { x0 + c } else { u0 + (c - n_x) };
            for a in 0..xl.len() {
                for bb in 0..xl.len() {
                    hmat[glob(a) * n + glob(bb)] -= hm[a][bb];
                }
            }
        }
        if self.n_term_ineq > 0 {
            let x0 = self.off_node(self.ocp.n_ctrl);
            let zb = &z[zr..zr + self.n_term_ineq];
            let hm = local_hess(
                |xd: &[Dual<Dual<f64>>]| {
                    let rws = self.ocp.cons.terminal_ineq(xd);
                    let mut acc = Dual::constant(0.0);
                    for (ri, &zi) in rws.iter().zip(zb) {
                        acc = acc + ri.clone().scale(zi);
                    }
                    acc
                },
                &w[x0..x0 + n_x],
            );
            for a in 0..n_x {
                for bb in 0..n_x {
                    hmat[(x0 + a) * n + (x0 + bb)] -= hm[a][bb];
                }
            }
        }
        {
            let x0 = self.off_node(self.ocp.n_ctrl);
            let hm = local_hess(
                |xd: &[Dual<Dual<f64>>]| self.ocp.cost.terminal(xd),
                &w[x0..x0 + n_x],
            );
            for a in 0..n_x {
                for bb in 0..n_x {
                    hmat[(x0 + a) * n + (x0 + bb)] += hm[a][bb];
                }
            }
        }
        hmat
    }

    /// Exact (unrelaxed) complementarity violation of an iterate.
    pub fn comp_residual(&self, w: &[f64]) -> f64 {
        let mut r = 0.0f64;
        for pair in &self.comp_pairs {
            let (a, b) = pair.sides(w);
            r = r.max((a * b).abs());
        }
        r
    }

    /// Default primal starting point: all nodes at the initial state with
    /// the clock on the target grid, controls at zero (clamped to their
    /// bounds), uniform element lengths, interior step variables.
    pub fn initial_guess(&self) -> Vec<f64> {
        let n_yq = self.n_yq();
        let n_x = n_yq - 2;
        let ns = self.tab.s;
        let n_f = self.dcs.n_f;
        let n_c = self.dcs.n_c;
        let mut w = vec![0.0; self.n_w];
        let s0 = (self.ocp.t_phys / self.ocp.t_num).clamp(1.0, self.ocp.s_max);
        for k in 0..=self.ocp.n_ctrl {
            let o = self.off_node(k);
            w[o..o + n_x].copy_from_slice(&self.ocp.x0);
            w[o + n_x] = k as f64 * self.ocp.t_phys / self.ocp.n_ctrl as f64;
        }
        for k in 0..self.ocp.n_ctrl {
            for iu in 0..self.n_u() {
                let (lo, hi) = (self.ocp.u_lb[iu], self.ocp.u_ub[iu]);
                w[self.off_u(k) + iu] = 0.0f64.clamp(lo.min(hi), hi.max(lo));
            }
            w[self.off_s(k)] = s0;
            let h0 = self.ocp.t_num / self.ocp.n_ctrl as f64 / self.n_el as f64;
            for i in 0..self.n_el {
                w[self.off_h(k, i)] = h0;
                for m in 0..ns {
                    let sy = self.off_sy(k, i, m);
                    let node = self.off_node(k);
                    for j in 0..n_yq {
                        w[sy + j] = w[node + j];
                    }
                    let sz = self.off_sz(k, i, m);
                    for j in 0..n_f {
                        w[sz + j] = 1.0 / n_f as f64;
                    }
                    for j in 0..n_c {
                        w[sz + n_f + j] = 0.5;
                        w[sz + n_f + n_c + j] = 0.1;
                        w[sz + n_f + 2 * n_c + j] = 0.1;
                    }
                }
            }
        }
        w
    }
}

// ---------------------------------------------------------------------------
// Homotopy loop

#[derive(Clone, Copy, Debug)]
pub struct HomotopyOpts {
    pub sigma0: f64,
    pub sigma_min: f64,
    pub factor: f64,
}

impl Default for HomotopyOpts {
    fn default() -> Self {
        HomotopyOpts {
            sigma0: 1.0,
            sigma_min: 1e-9,
            factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MpccStatus {
    Converged,
    /// A later relaxation stage failed; the reported iterate is the last
    /// successful one.
    Stalled { sigma: f64, reason: String },
}

#[derive(Clone, Debug)]
pub struct MPCCSolution {
    pub w: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub comp_residual: f64,
    /// (sigma, nlp iterations, complementarity residual) per stage.
    pub stages: Vec<(f64, usize, f64)>,
    pub status: MpccStatus,
}

/// Drive a relaxation parameter from sigma0 down to sigma_min, solving
/// the NLP produced by `make_nlp` at each stage warm-started from the
/// previous one. `comp_res` measures the exact complementarity violation.
pub fn solve_relaxation_homotopy(
    make_nlp: impl Fn(f64) -> crate::nlp::NLPProblem,
    comp_res: impl Fn(&[f64]) -> f64,
    w0: Vec<f64>,
    hopts: &HomotopyOpts,
    nopts: &crate::nlp::NLPOptions,
) -> Result<MPCCSolution> {
    let mut sigma = hopts.sigma0;
    let mut w = w0;
    let mut duals: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut stages = Vec::new();
    let mut best: Option<MPCCSolution> = None;
    loop {
        let nlp = make_nlp(sigma);
        let warm = duals.as_ref().map(|(l, z)| (l.as_slice(), z.as_slice()));
        match crate::nlp::solve(&nlp, &w, warm, nopts) {
            Ok(sol) => {
                let cr = comp_res(&sol.x);
                stages.push((sigma, sol.iters, cr));
                w = sol.x.clone();
                duals = Some((sol.lambda_eq.clone(), sol.z_all.clone()));
                best = Some(MPCCSolution {
                    w: sol.x,
                    objective: sol.objective,
                    kkt_residual: sol.kkt_residual,
                    comp_residual: cr,
                    stages: stages.clone(),
                    status: MpccStatus::Converged,
                });
            }
            Err(e) => {
                return match best {
                    Some(mut b) => {
                        b.status = MpccStatus::Stalled {
                            sigma,
                            reason: e.to_string(),
                        };
                        Ok(b)
                    }
                    None => Err(Error::HomotopyStalled {
                        sigma,
                        reason: e.to_string(),
                    }),
                };
            }
        }
        if sigma <= hopts.sigma_min * 1.0001 {
            return Ok(best.unwrap());
        }
        sigma = (sigma / hopts.factor).max(hopts.sigma_min);
    }
}

/// The NLP of one relaxation stage.
pub fn relaxed_nlp<D: CLSDynamics, C: OcpCost, G: OcpConstraints>(
    mpcc: &Arc<MPCCProblem<D, C, G>>,
    sigma: f64,
) -> crate::nlp::NLPProblem {
    let (p1, p2, p3, p4, p5, p6, p7) = (
        mpcc.clone(),
        mpcc.clone(),
        mpcc.clone(),
        mpcc.clone(),
        mpcc.clone(),
        mpcc.clone(),
        mpcc.clone(),
    );
    crate::nlp::NLPProblem {
        n: mpcc.n_w,
        n_eq: mpcc.n_eq,
        n_ineq: mpcc.n_ineq(),
        objective: Box::new(move |w| p1.eval_obj(w)),
        gradient: Box::new(move |w| p2.eval_obj_grad(w)),
        eq: Box::new(move |w| p3.eval_eq(w)),
        eq_jac: Box::new(move |w| p4.eval_eq_jac(w)),
        ineq: Box::new(move |w| p5.eval_ineq(w, sigma)),
        ineq_jac: Box::new(move |w| p6.eval_ineq_jac(w)),
        lb: mpcc.lb.clone(),
        ub: mpcc.ub.clone(),
        lag_hessian: Some(Box::new(move |w, lam, z| p7.eval_lag_hessian(w, lam, z))),
    }
}

/// Solve the MPCC with the Scholtes-style relaxation homotopy.
pub fn solve_mpcc<D: CLSDynamics, C: OcpCost, G: OcpConstraints>(
    mpcc: &Arc<MPCCProblem<D, C, G>>,
    hopts: &HomotopyOpts,
    nopts: &crate::nlp::NLPOptions,
) -> Result<MPCCSolution> {
    let w0 = mpcc.initial_guess();
    let mpcc2 = mpcc.clone();
    solve_relaxation_homotopy(
        |sigma| relaxed_nlp(mpcc, sigma),
        move |w| mpcc2.comp_residual(w),
        w0,
        hopts,
        nopts,
    )
}

// ---------------------------------------------------------------------------
// Control recovery

pub struct RecoveredControl {
    /// Left endpoints of the physical-time control grid (k T / N).
    pub t_grid: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub control: GridControl,
    /// Event-driven resimulation under the recovered control.
    pub trajectory: Trajectory,
    pub physical: PhysicalSolution,
}

/// Read the piecewise-constant control and speed off a solved MPCC,
/// resimulate the system under them, and recover the physical solution.
pub fn recover_control<D: CLSDynamics, C: OcpCost, G: OcpConstraints>(
    mpcc: &MPCCProblem<D, C, G>,
    w: &[f64],
) -> Result<RecoveredControl> {
    let n = mpcc.ocp.n_ctrl;
    let dt = mpcc.ocp.t_phys / n as f64;
    let t_grid: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let u: Vec<Vec<f64>> = (0..n).map(|k| mpcc.control(w, k)).collect();
    let s: Vec<f64> = (0..n).map(|k| mpcc.speed(w, k)).collect();
    let control = GridControl {
        t_grid: t_grid.clone(),
        u: u.clone(),
        s: s.clone(),
    };
    let sys = &mpcc.ocp.sys;
    let mut y0 = mpcc.ocp.x0.clone();
    y0.push(0.0); // clock
    let trajectory = simulate_event_driven(
        sys,
        &y0,
        &control,
        mpcc.ocp.t_num,
        &SimOptions::default(),
    )?;
    let physical = to_physical(sys, &trajectory, &control)?;
    Ok(RecoveredControl {
        t_grid,
        u,
        s,
        control,
        trajectory,
        physical,
    })
}

// ---------------------------------------------------------------------------
