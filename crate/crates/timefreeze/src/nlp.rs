//! Primal-dual interior-point solver for the smooth relaxed problems
//! produced by the homotopy loop, plus a deliberately simple quadratic
//! penalty + BFGS solver used to cross-check solutions on small
//! instances.
//!
//! The KKT system is reordered with reverse Cuthill-McKee and factored
//! with a banded LDL^T, with diagonal regularization doubled until the
//! inertia matches (n positive, m negative pivots). This keeps the cost
//! at O(n b^2) on the near-block-diagonal systems that multiple shooting
//! produces, while staying a plain dense method on small problems.

use crate::error::{Error, Result};

type Callable<T> = Box<dyn Fn(&[f64]) -> T + Send + Sync>;

/// Smooth nonlinear program
///   min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  lb <= x <= ub.
/// Jacobians are dense row lists. The optional Hessian is that of the
/// Lagrangian f - lambda^T c_E - z^T c_I (row-major n x n); without it a
/// damped BFGS approximation is maintained internally.
pub struct NLPProblem {
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub objective: Callable<f64>,
    pub gradient: Callable<Vec<f64>>,
    pub eq: Callable<Vec<f64>>,
    pub eq_jac: Callable<Vec<Vec<f64>>>,
    pub ineq: Callable<Vec<f64>>,
    pub ineq_jac: Callable<Vec<Vec<f64>>>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    #[allow(clippy::type_complexity)]
    pub lag_hessian: Option<Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>>,
}

impl NLPProblem {
    /// Unconstrained shell with free bounds; fill in the pieces needed.
    pub fn new(n: usize, objective: Callable<f64>, gradient: Callable<Vec<f64>>) -> Self {
        NLPProblem {
            n,
            n_eq: 0,
            n_ineq: 0,
            objective,
            gradient,
            eq: Box::new(|_| Vec::new()),
            eq_jac: Box::new(|_| Vec::new()),
            ineq: Box::new(|_| Vec::new()),
            ineq_jac: Box::new(|_| Vec::new()),
            lb: vec![f64::NEG_INFINITY; n],
            ub: vec![f64::INFINITY; n],
            lag_hessian: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NLPOptions {
    pub tol_kkt: f64,
    /// Fallback stationarity tolerance: if no further step can be
    /// accepted but the KKT residual is below this, the point is
    /// returned as a solution instead of an error.
    pub tol_acceptable: f64,
    pub mu0: f64,
    pub max_iter: usize,
}

impl Default for NLPOptions {
    fn default() -> Self {
        NLPOptions {
            tol_kkt: 1e-8,
            tol_acceptable: 1e-5,
            mu0: 0.1,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NLPSolution {
    pub x: Vec<f64>,
    pub lambda_eq: Vec<f64>,
    /// Multipliers of the user inequalities (bound multipliers excluded).
    pub z_ineq: Vec<f64>,
    /// Full inequality multiplier vector including bound rows, in the
    /// solver's internal order; useful for warm starts.
    pub z_all: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iters: usize,
    /// (barrier value, penalty weight, merit value) per accepted step; the
    /// merit decreases monotonically while the first two stay fixed.
    pub merit_log: Vec<(f64, f64, f64)>,
}

// ---------------------------------------------------------------------------
// Banded symmetric indefinite factorization with RCM reordering

/// Reverse Cuthill-McKee ordering of an undirected sparsity graph.
/// Returns perm with perm[new] = old.
fn rcm_order(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&i| adj[i].len());
    for &start in &nodes {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| adj[w].len());
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Solve the symmetric indefinite system K x = rhs where the leading
/// `n_pos` unknowns are primal (expect positive pivots) and the rest dual
/// (expect negative pivots). A primal shift +delta_p fixes wrong inertia;
/// a small constant dual shift -delta_d keeps every pivot well-defined; the
/// bias it adds to the linearized equalities is removed by refinement.
fn solve_kkt(k_dense: &[f64], rhs: &[f64], dim: usize, n_pos: usize) -> Result<Vec<f64>> {
    // Sparsity graph and RCM band reduction.
    let mut adj = vec![Vec::new(); dim];
    for i in 0..dim {
        for j in i + 1..dim {
            if k_dense[i * dim + j] != 0.0 {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let perm = rcm_order(&adj);
    let mut inv = vec![0usize; dim];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut bw = 0usize;
    for i in 0..dim {
        for &j in &adj[i] {
            bw = bw.max(inv[i].abs_diff(inv[j]));
        }
    }

    let band = |i: usize, j: usize| i * (bw + 1) + (i - j);
    // The dual shift is always on: the elimination order is not
    // guaranteed to visit a dual row only after its primal support, and
    // an unshifted dual row then yields a zero pivot. The shift's bias on
    // the step is removed by iterative refinement below.
    let mut delta_p = 0.0f64;
    let delta_d = 1e-8f64;
    for _ in 0..60 {
        // Assemble the permuted band (lower triangle).
        let mut a = vec![0.0; dim * (bw + 1)];
        for newi in 0..dim {
            let oldi = perm[newi];
            let lo = newi.saturating_sub(bw);
            for newj in lo..=newi {
                let oldj = perm[newj];
                let (r, c) = if oldi >= oldj { (oldi, oldj) } else { (oldj, oldi) };
                let mut v = k_dense[r * dim + c];
                if newi == newj {
                    v += if oldi < n_pos { delta_p } else { -delta_d };
                }
                let idx = band(newi, newj);
                a[idx] = v;
            }
        }
        // In-place banded LDL^T.
        let mut d = vec![0.0; dim];
        let mut ok = true;
        let mut pos = 0usize;
        let mut neg = 0usize;
        for j in 0..dim {
            let lo = j.saturating_sub(bw);
            let mut dj = a[j * (bw + 1)];
            for k in lo..j {
                let l = a[j * (bw + 1) + (j - k)];
                dj -= l * l * d[k];
            }
            if dj.abs() < 1e-13 {
                ok = false;
                break;
            }
            d[j] = dj;
            if dj > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            let hi = (j + bw).min(dim - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = if i - j <= bw { a[i * (bw + 1) + (i - j)] } else { 0.0 };
                for k in lo_i..j {
                    v -= a[i * (bw + 1) + (i - k)] * a[j * (bw + 1) + (j - k)] * d[k];
                }
                a[i * (bw + 1) + (i - j)] = v / dj;
            }
        }
        if ok && pos == n_pos && neg == dim - n_pos {
            let backsolve = |r: &[f64]| -> Vec<f64> {
                // Forward, diagonal, backward solves in the permuted order.
                let mut y: Vec<f64> = (0..dim).map(|i| r[perm[i]]).collect();
                for i in 0..dim {
                    let lo = i.saturating_sub(bw);
                    for k in lo..i {
                        y[i] -= a[i * (bw + 1) + (i - k)] * y[k];
                    }
                }
                for i in 0..dim {
                    y[i] /= d[i];
                }
                for i in (0..dim).rev() {
                    let hi = (i + bw).min(dim - 1);
                    for k in i + 1..=hi {
                        y[i] -= a[k * (bw + 1) + (k - i)] * y[k];
                    }
                }
                let mut x = vec![0.0; dim];
                for (new, &old) in perm.iter().enumerate() {
                    x[old] = y[new];
                }
                x
            };
            let residual = |x: &[f64]| -> Vec<f64> {
                // Against the original, unregularized matrix.
                let mut r = rhs.to_vec();
                for i in 0..dim {
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in 0..dim {
                        let v = if i >= j { k_dense[i * dim + j] } else { k_dense[j * dim + i] };
                        if v != 0.0 {
                            r[j] -= v * xi;
                        }
                    }
                }
                r
            };
            // Iterative refinement removes the regularization bias from
            // the step; without it a dual shift, however small, leaves
            // J_E dx != -c_e and that wrecks the merit model whenever
            // the dual step is large (degenerate multipliers).
            let mut x = backsolve(rhs);
            let scale = 10.0 * (1.0 + inf_norm(&x));
            let mut best = x.clone();
            let mut best_norm = inf_norm(&residual(&x));
            for _ in 0..5 {
                if best_norm < 1e-12 {
                    break;
                }
                let r = residual(&x);
                let dx = backsolve(&r);
                for (xi, di) in x.iter_mut().zip(&dx) {
                    *xi += di;
                }
                let rn = inf_norm(&residual(&x));
                // A singular unregularized system lets refinement drift
                // along its null space; keep corrections only while the
                // solution stays commensurate with the first one.
                if rn < best_norm && inf_norm(&x) <= scale {
                    best_norm = rn;
                    best = x.clone();
                } else {
                    break;
                }
            }
            return Ok(best);
        }
        delta_p = if delta_p == 0.0 { 1e-8 } else { delta_p * 10.0 };
        if delta_p > 1e12 {
            break;
        }
    }
    Err(Error::SingularKKT)
}

// ---------------------------------------------------------------------------
// Interior-point solver

/// Inequality block with the finite bounds folded in as extra rows.
struct IneqView<'a> {
    nlp: &'a NLPProblem,
    lb_idx: Vec<usize>,
    ub_idx: Vec<usize>,
}

impl<'a> IneqView<'a> {
    fn new(nlp: &'a NLPProblem) -> Self {
        let lb_idx = (0..nlp.n).filter(|&i| nlp.lb[i].is_finite()).collect();
        let ub_idx = (0..nlp.n).filter(|&i| nlp.ub[i].is_finite()).collect();
        IneqView { nlp, lb_idx, ub_idx }
    }

    fn m(&self) -> usize {
        self.nlp.n_ineq + self.lb_idx.len() + self.ub_idx.len()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut c = (self.nlp.ineq)(x);
        c.extend(self.lb_idx.iter().map(|&i| x[i] - self.nlp.lb[i]));
        c.extend(self.ub_idx.iter().map(|&i| self.nlp.ub[i] - x[i]));
        c
    }

    /// J_I^T w accumulated into out.
    fn jt_mul(&self, jac: &[Vec<f64>], w: &[f64], out: &mut [f64]) {
        for (row, &wi) in jac.iter().zip(w) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r * wi;
            }
        }
        let m0 = self.nlp.n_ineq;
        for (k, &i) in self.lb_idx.iter().enumerate() {
            out[i] += w[m0 + k];
        }
        for (k, &i) in self.ub_idx.iter().enumerate() {
            out[i] -= w[m0 + self.lb_idx.len() + k];
        }
    }

    /// J_I dx.
    fn j_mul(&self, jac: &[Vec<f64>], dx: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = jac
            .iter()
            .map(|row| row.iter().zip(dx).map(|(a, b)| a * b).sum())
            .collect();
        out.extend(self.lb_idx.iter().map(|&i| dx[i]));
        out.extend(self.ub_idx.iter().map(|&i| -dx[i]));
        out
    }

    /// Add J_I^T diag(sig) J_I into the dense n x n block `h`.
    fn add_weighted_gram(&self, jac: &[Vec<f64>], sig: &[f64], h: &mut [f64]) {
        let n = self.nlp.n;
        for (row, &s) in jac.iter().zip(sig) {
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                let ri = s * row[i];
                for j in 0..n {
                    h[i * n + j] += ri * row[j];
                }
            }
        }
        let m0 = self.nlp.n_ineq;
        for (k, &i) in self.lb_idx.iter().enumerate() {
            h[i * n + i] += sig[m0 + k];
        }
        for (k, &i) in self.ub_idx.iter().enumerate() {
            h[i * n + i] += sig[m0 + self.lb_idx.len() + k];
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solve the NLP from `x_init` with a monotone barrier schedule
/// (mu <- mu/5), fraction-to-boundary steps, and an l1-penalty merit line
/// search. Returns the primal-dual point with KKT residual <= tol_kkt.
/// `duals_init` optionally warm-starts (lambda_eq, z_ineq).
pub fn solve(
    nlp: &NLPProblem,
    x_init: &[f64],
    duals_init: Option<(&[f64], &[f64])>,
    opts: &NLPOptions,
) -> Result<NLPSolution> {
    let n = nlp.n;
    let m_e = nlp.n_eq;
    let iv = IneqView::new(nlp);
    let m_i = iv.m();

    // Strictly interior start.
    let mut x = x_init.to_vec();
    for i in 0..n {
        let pad_l = if nlp.lb[i].is_finite() { nlp.lb[i] + 1e-4 } else { f64::NEG_INFINITY };
        let pad_u = if nlp.ub[i].is_finite() { nlp.ub[i] - 1e-4 } else { f64::INFINITY };
        x[i] = x[i].clamp(pad_l.min(pad_u), pad_u.max(pad_l));
    }
    // The floor keeps the initial scaling matrix z/s moderate; honest
    // slacks at a nearly-active constraint put 1e6 on its diagonal and
    // cripple the first steps. The artificial |c - s| infeasibility this
    // introduces is handled by the penalty update below.
    let mut s: Vec<f64> = iv.eval(&x).iter().map(|&c| c.max(1e-2)).collect();
    let mut lam = vec![0.0; m_e];
    let mut z = vec![1.0; m_i];
    if let Some((l0, z0)) = duals_init {
        lam.copy_from_slice(l0);
        for (zi, &v) in z.iter_mut().zip(z0) {
            *zi = v.max(1e-8);
        }
    }

    let mut mu = opts.mu0;
    let mut nu = 1.0f64; // l1 penalty weight
    let mut merit_log = Vec::new();
    let mut bfgs: Option<Vec<f64>> = if nlp.lag_hessian.is_none() {
        Some((0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect())
    } else {
        None
    };
    let mut prev_x: Option<Vec<f64>> = None;

    let merit = |x: &[f64], s: &[f64], mu: f64, nu: f64| -> f64 {
        let mut phi = (nlp.objective)(x);
        for &si in s {
            phi -= mu * si.ln();
        }
        phi += nu * (nlp.eq)(x).iter().map(|c| c.abs()).sum::<f64>();
        phi += nu
            * iv.eval(x)
                .iter()
                .zip(s)
                .map(|(c, si)| (c - si).abs())
                .sum::<f64>();
        phi
    };

    let mut iters = 0usize;
    let mut last_kkt = f64::INFINITY;
    loop {
        if iters >= opts.max_iter {
            if last_kkt <= opts.tol_acceptable {
                return Ok(NLPSolution {
                    objective: (nlp.objective)(&x),
                    x,
                    lambda_eq: lam,
                    z_ineq: z[..nlp.n_ineq].to_vec(),
                    z_all: z,
                    kkt_residual: last_kkt,
                    iters,
                    merit_log,
                });
            }
            return Err(Error::MaxIter);
        }
        iters += 1;

        let g = (nlp.gradient)(&x);
        let c_e = (nlp.eq)(&x);
        let j_e = (nlp.eq_jac)(&x);
        let c_i = iv.eval(&x);
        let j_i = (nlp.ineq_jac)(&x);

        // Residuals of the barrier KKT system.
        let mut r_d = g.clone();
        for (row, &l) in j_e.iter().zip(&lam) {
            for (rd, &r) in r_d.iter_mut().zip(row) {
                *rd -= r * l;
            }
        }
        let mut neg_z = vec![0.0; n];
        iv.jt_mul(&j_i, &z, &mut neg_z);
        for (rd, nz) in r_d.iter_mut().zip(&neg_z) {
            *rd -= nz;
        }
        let r_i: Vec<f64> = c_i.iter().zip(&s).map(|(c, si)| c - si).collect();
        let comp0: Vec<f64> = s.iter().zip(&z).map(|(si, zi)| si * zi).collect();

        let kkt0 = inf_norm(&r_d).max(inf_norm(&c_e)).max(inf_norm(&r_i)).max(inf_norm(&comp0));
        last_kkt = kkt0;
        if kkt0 <= opts.tol_kkt {
            return Ok(NLPSolution {
                objective: (nlp.objective)(&x),
                x,
                lambda_eq: lam,
                z_ineq: z[..nlp.n_ineq].to_vec(),
                z_all: z,
                kkt_residual: kkt0,
                iters,
                merit_log,
            });
        }
        let comp_mu =
            inf_norm(&s.iter().zip(&z).map(|(si, zi)| si * zi - mu).collect::<Vec<_>>());
        let kkt_mu = inf_norm(&r_d).max(inf_norm(&c_e)).max(inf_norm(&r_i)).max(comp_mu);
        if kkt_mu <= (0.1 * mu).max(opts.tol_kkt) && mu > opts.tol_kkt / 10.0 {
            mu = (mu / 5.0).max(opts.tol_kkt / 20.0);
            continue;
        }

        // Lagrangian Hessian (exact or BFGS).
        let mut h = match &nlp.lag_hessian {
            Some(f) => f(&x, &lam, &z[..nlp.n_ineq]),
            None => {
                // Damped BFGS on the Lagrangian gradient; both secant ends
                // use the current multipliers or the update is inconsistent.
                if let (Some(b), Some(xp)) = (bfgs.as_mut(), prev_x.as_ref()) {
                    let mut gp = (nlp.gradient)(xp);
                    for (row, &l) in (nlp.eq_jac)(xp).iter().zip(&lam) {
                        for (gi, &r) in gp.iter_mut().zip(row) {
                            *gi -= r * l;
                        }
                    }
                    let mut jtz = vec![0.0; n];
                    iv.jt_mul(&(nlp.ineq_jac)(xp), &z, &mut jtz);
                    for (gi, v) in gp.iter_mut().zip(&jtz) {
                        *gi -= v;
                    }
                    let sv: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
                    let yv: Vec<f64> = r_d.iter().zip(&gp).map(|(a, b)| a - b).collect();
                    let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
                    let ss: f64 = sv.iter().map(|a| a * a).sum();
                    if sy > 1e-10 * ss.sqrt() && ss > 0.0 {
                        let mut bs = vec![0.0; n];
                        for i in 0..n {
                            bs[i] = (0..n).map(|j| b[i * n + j] * sv[j]).sum();
                        }
                        let sbs: f64 = sv.iter().zip(&bs).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            for j in 0..n {
                                b[i * n + j] += yv[i] * yv[j] / sy - bs[i] * bs[j] / sbs;
                            }
                        }
                    }
                }
                prev_x = Some(x.clone());
                bfgs.clone().unwrap()
            }
        };

        // Slack-condensed primal block: H + J_I^T diag(z/s) J_I.
        let sig: Vec<f64> = z.iter().zip(&s).map(|(zi, si)| zi / si).collect();
        iv.add_weighted_gram(&j_i, &sig, &mut h);

        // KKT matrix [[H_c, J_E^T], [J_E, 0]], unknowns (dx, -dlam).
        let dim = n + m_e;
        let mut kkt = vec![0.0; dim * dim];
        for i in 0..n {
            for j in 0..n {
                kkt[i * dim + j] = h[i * n + j];
            }
        }
        for (r, row) in j_e.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                kkt[(n + r) * dim + j] = v;
                kkt[j * dim + n + r] = v;
            }
        }
        let mut rhs = vec![0.0; dim];
        // -(r_d + J_I^T (sigma.r_I - mu/s + z))
        let wvec: Vec<f64> = (0..m_i)
            .map(|k| sig[k] * r_i[k] - mu / s[k] + z[k])
            .collect();
        let mut jt_w = vec![0.0; n];
        iv.jt_mul(&j_i, &wvec, &mut jt_w);
        for i in 0..n {
            rhs[i] = -(r_d[i] + jt_w[i]);
        }
        for r in 0..m_e {
            rhs[n + r] = -c_e[r];
        }
        let sol = solve_kkt(&kkt, &rhs, dim, n)?;
        let dx = &sol[..n];
        let dlam: Vec<f64> = sol[n..].iter().map(|v| -v).collect();
        let ds: Vec<f64> = iv
            .j_mul(&j_i, dx)
            .iter()
            .zip(&r_i)
            .map(|(jd, ri)| jd + ri)
            .collect();
        let dz: Vec<f64> = (0..m_i)
            .map(|k| mu / s[k] - z[k] - sig[k] * ds[k])
            .collect();

        // Fraction-to-boundary step caps.
        let tau_b = 0.995;
        let mut a_p = 1.0f64;
        for k in 0..m_i {
            if ds[k] < 0.0 {
                a_p = a_p.min(-tau_b * s[k] / ds[k]);
            }
        }
        let mut a_d = 1.0f64;
        for k in 0..m_i {
            if dz[k] < 0.0 {
                a_d = a_d.min(-tau_b * z[k] / dz[k]);
            }
        }

        // l1 merit line search on (x, s).
        let infeas0: f64 =
            c_e.iter().map(|c| c.abs()).sum::<f64>() + r_i.iter().map(|c| c.abs()).sum::<f64>();
        let smooth_slope: f64 = g.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>()
            - mu * s.iter().zip(&ds).map(|(si, di)| di / si).sum::<f64>();
        // Raise the penalty until the direction is a descent direction
        // for the merit; the Newton step removes the linearized
        // infeasibility, so a large enough nu always achieves this. The
        // cap avoids poisoning the merit when the step is dual-dominated
        // (tiny infeasibility, positive smooth slope); such steps are
        // handled by the KKT-error fallback below instead.
        if infeas0 > 1e-14 {
            let nu_req = smooth_slope / (0.5 * infeas0);
            if nu < nu_req {
                nu = (nu_req + 1.0).min(1e8);
            }
        }
        let phi0 = merit(&x, &s, mu, nu);
        let d_phi: f64 = smooth_slope - nu * infeas0;
        let mut alpha = a_p;
        let mut accepted = false;
        // The merit is evaluated to roughly this absolute precision; once
        // the expected Armijo decrease sinks below it the test is
        // meaningless and acceptance falls through to the KKT criterion.
        let noise = 1e-12 * (1.0 + phi0.abs());
        if d_phi < 0.0 {
            for _ in 0..40 {
                if 1e-4 * alpha * (-d_phi) <= noise {
                    break;
                }
                let x_t: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + alpha * b).collect();
                let s_t: Vec<f64> = s.iter().zip(&ds).map(|(a, b)| a + alpha * b).collect();
                let phi_t = merit(&x_t, &s_t, mu, nu);
                if phi_t <= phi0 + 1e-4 * alpha * d_phi && phi_t.is_finite() {
                    x = x_t;
                    s = s_t;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if accepted {
            // Equality multipliers move with the primal step length;
            // bound duals take their own fraction-to-boundary step.
            for (l, dl) in lam.iter_mut().zip(&dlam) {
                *l += alpha * dl;
            }
            for ((zi, dzi), _si) in z.iter_mut().zip(&dz).zip(&s) {
                *zi += a_d * dzi;
            }
        } else {
            // Merit line search failed (or the direction is not a merit
            // descent direction). The step may still be useful: a
            // dual-dominated correction lowers the KKT error while the
            // merit, which ignores the multipliers, is flat or rises.
            // Accept the largest backtracked step that reduces the
            // barrier KKT residual evaluated with the trial multipliers.
            let kkt_at = |x_t: &[f64], s_t: &[f64], lam_t: &[f64], z_t: &[f64]| -> f64 {
                let mut rd = (nlp.gradient)(x_t);
                for (row, &l) in (nlp.eq_jac)(x_t).iter().zip(lam_t) {
                    for (r, &v) in rd.iter_mut().zip(row) {
                        *r -= v * l;
                    }
                }
                let mut jtz = vec![0.0; n];
                iv.jt_mul(&(nlp.ineq_jac)(x_t), z_t, &mut jtz);
                for (r, v) in rd.iter_mut().zip(&jtz) {
                    *r -= v;
                }
                let ce_n = inf_norm(&(nlp.eq)(x_t));
                let ri_n = iv
                    .eval(x_t)
                    .iter()
                    .zip(s_t)
                    .map(|(c, si)| (c - si).abs())
                    .fold(0.0f64, f64::max);
                let co_n = s_t
                    .iter()
                    .zip(z_t)
                    .map(|(si, zi)| (si * zi - mu).abs())
                    .fold(0.0f64, f64::max);
                inf_norm(&rd).max(ce_n).max(ri_n).max(co_n)
            };
            let kkt_ref = kkt_at(&x, &s, &lam, &z);
            let mut a = a_p.min(a_d);
            for _ in 0..30 {
                let x_t: Vec<f64> = x.iter().zip(dx).map(|(v, d)| v + a * d).collect();
                let s_t: Vec<f64> = s.iter().zip(&ds).map(|(v, d)| v + a * d).collect();
                let lam_t: Vec<f64> = lam.iter().zip(&dlam).map(|(v, d)| v + a * d).collect();
                let z_t: Vec<f64> = z.iter().zip(&dz).map(|(v, d)| v + a * d).collect();
                let kkt_t = kkt_at(&x_t, &s_t, &lam_t, &z_t);
                if kkt_t.is_finite() && kkt_t <= (1.0 - 0.1 * a) * kkt_ref {
                    x = x_t;
                    s = s_t;
                    lam = lam_t;
                    z = z_t;
                    alpha = a;
                    accepted = true;
                    break;
                }
                a *= 0.5;
            }
            if !accepted {
                if kkt0 <= opts.tol_acceptable {
                    return Ok(NLPSolution {
                        objective: (nlp.objective)(&x),
                        x,
                        lambda_eq: lam,
                        z_ineq: z[..nlp.n_ineq].to_vec(),
                        z_all: z,
                        kkt_residual: kkt0,
                        iters,
                        merit_log,
                    });
                }
                return Err(Error::LineSearchFailure);
            }
        }
        // Safeguard against runaway equality multipliers: a diverging
        // lambda inflates the penalty weight and deadlocks the line
        // search, so restart it from zero and let the next KKT solve
        // re-estimate it.
        let lam_cap = 1e4 * (1.0 + inf_norm(&g));
        if inf_norm(&lam) > lam_cap {
            lam.iter_mut().for_each(|l| *l = 0.0);
        }
        // Keep each dual within a wide box around mu/s so that s_i z_i
        // cannot run away from the barrier target (IPOPT's kappa-sigma
        // safeguard); unbounded duals feed back into the penalty weight
        // and destroy the line search.
        const KAPPA: f64 = 1e10;
        for (zi, si) in z.iter_mut().zip(&s) {
            *zi = zi.clamp((mu / (KAPPA * si)).max(1e-16), KAPPA * mu / si);
        }
        merit_log.push((mu, nu, merit(&x, &s, mu, nu)));
    }
}

// ---------------------------------------------------------------------------
// Naive cross-check solver: quadratic penalty + BFGS

/// Minimize f + rho/2 (|c_E|^2 + |min(c_I,0)|^2 + bound violations^2) with
/// BFGS, increasing rho tenfold per stage. Slow and low-accuracy by
/// design; used to cross-validate the interior-point solver on small
/// problems.
pub fn solve_penalty(nlp: &NLPProblem, x_init: &[f64], rho_max: f64) -> Result<Vec<f64>> {
    let n = nlp.n;
    let iv = IneqView::new(nlp);
    let mut x = x_init.to_vec();

    let pen_val = |x: &[f64], rho: f64| -> f64 {
        let mut p = (nlp.objective)(x);
        for c in (nlp.eq)(x) {
            p += 0.5 * rho * c * c;
        }
        for c in iv.eval(x) {
            let v = c.min(0.0);
            p += 0.5 * rho * v * v;
        }
        p
    };
    let pen_grad = |x: &[f64], rho: f64| -> Vec<f64> {
        let mut g = (nlp.gradient)(x);
        let c_e = (nlp.eq)(x);
        let j_e = (nlp.eq_jac)(x);
        for (row, &c) in j_e.iter().zip(&c_e) {
            for (gi, &r) in g.iter_mut().zip(row) {
                *gi += rho * c * r;
            }
        }
        let c_i = iv.eval(x);
        let j_i = (nlp.ineq_jac)(x);
        let w: Vec<f64> = c_i.iter().map(|&c| rho * c.min(0.0)).collect();
        iv.jt_mul(&j_i, &w, &mut g);
        g
    };

    let mut rho = 10.0;
    while rho <= rho_max {
        // BFGS with inverse-Hessian updates.
        let mut hinv: Vec<f64> =
            (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let mut g = pen_grad(&x, rho);
        for _ in 0..2000 {
            if inf_norm(&g) <= 1e-10 * rho.max(1.0) {
                break;
            }
            let mut d = vec![0.0; n];
            for i in 0..n {
                d[i] = -(0..n).map(|j| hinv[i * n + j] * g[j]).sum::<f64>();
            }
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let d = if gd < 0.0 {
                d
            } else {
                g.iter().map(|v| -v).collect()
            };
            let gd = gd.min(-inf_norm(&g).powi(2) * 0.0);
            let p0 = pen_val(&x, rho);
            let mut alpha = 1.0;
            let mut x_t = x.clone();
            let mut moved = false;
            for _ in 0..60 {
                for i in 0..n {
                    x_t[i] = x[i] + alpha * d[i];
                }
                if pen_val(&x_t, rho) <= p0 + 1e-4 * alpha * gd {
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
            let g_new = pen_grad(&x_t, rho);
            let sv: Vec<f64> = x_t.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
            if sy > 1e-12 {
                // Sherman-Morrison BFGS update of the inverse.
                let mut hy = vec![0.0; n];
                for i in 0..n {
                    hy[i] = (0..n).map(|j| hinv[i * n + j] * yv[j]).sum();
                }
                let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    for j in 0..n {
                        hinv[i * n + j] += (sy + yhy) * sv[i] * sv[j] / (sy * sy)
                            - (hy[i] * sv[j] + sv[i] * hy[j]) / sy;
                    }
                }
            }
            x = x_t;
            g = g_new;
        }
        rho *= 10.0;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x-1)^2 with bound x >= 2.
    fn bound_problem() -> NLPProblem {
        let mut p = NLPProblem::new(
            1,
            Box::new(|x: &[f64]| (x[0] - 1.0).powi(2)),
            Box::new(|x: &[f64]| vec![2.0 * (x[0] - 1.0)]),
        );
        p.lb[0] = 2.0;
        p.lag_hessian = Some(Box::new(|_, _, _| vec![2.0]));
        p
    }

    #[test]
    fn bound_becomes_active() {
        let p = bound_problem();
        let sol = solve(&p, &[5.0], None, &NLPOptions::default()).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-7, "{}", sol.x[0]);
    }

    /// min (x-1)^2 + (y-2)^2 s.t. x + y = 2; optimum (0.5, 1.5).
    fn eq_qp() -> NLPProblem {
        let mut p = NLPProblem::new(
            2,
            Box::new(|x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2)),
            Box::new(|x: &[f64]| vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] - 2.0)]),
        );
        p.n_eq = 1;
        p.eq = Box::new(|x: &[f64]| vec![x[0] + x[1] - 2.0]);
        p.eq_jac = Box::new(|_| vec![vec![1.0, 1.0]]);
        p.lag_hessian = Some(Box::new(|_, _, _| vec![2.0, 0.0, 0.0, 2.0]));
        p
    }

    #[test]
    fn equality_qp_matches_closed_form() {
        let p = eq_qp();
        let sol = solve(&p, &[0.0, 0.0], None, &NLPOptions::default()).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-10, "{}", sol.x[0]);
        assert!((sol.x[1] - 1.5).abs() < 1e-10, "{}", sol.x[1]);
        // The equality multiplier satisfies 2(x-1) - lambda = 0.
        assert!((sol.lambda_eq[0] + 1.0).abs() < 1e-8);
    }

    /// Constrained Rosenbrock: min (1-x)^2 + 100(y-x^2)^2
    /// s.t. x + y <= 1, x >= 0, y >= 0.
    fn rosenbrock() -> NLPProblem {
        let mut p = NLPProblem::new(
            2,
            Box::new(|x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)),
            Box::new(|x: &[f64]| {
                vec![
                    -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                    200.0 * (x[1] - x[0] * x[0]),
                ]
            }),
        );
        p.n_ineq = 1;
        p.ineq = Box::new(|x: &[f64]| vec![1.0 - x[0] - x[1]]);
        p.ineq_jac = Box::new(|_| vec![vec![-1.0, -1.0]]);
        p.lb = vec![0.0, 0.0];
        p.lag_hessian = Some(Box::new(|x: &[f64], _, _| {
            vec![
                2.0 - 400.0 * (x[1] - 3.0 * x[0] * x[0]),
                -400.0 * x[0],
                -400.0 * x[0],
                200.0,
            ]
        }));
        p
    }

    /// Three-level grid refinement over the feasible triangle.
    fn rosenbrock_grid_oracle() -> (f64, f64) {
        let f = |x: f64, y: f64| (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let (mut cx, mut cy, mut half) = (0.5, 0.5, 0.5);
        let mut best = (0.0, 0.0, f64::INFINITY);
        for _ in 0..8 {
            let steps = 200;
            for i in 0..=steps {
                for j in 0..=steps {
                    let x = cx - half + 2.0 * half * i as f64 / steps as f64;
                    let y = cy - half + 2.0 * half * j as f64 / steps as f64;
                    if x < 0.0 || y < 0.0 || x + y > 1.0 {
                        continue;
                    }
                    let v = f(x, y);
                    if v < best.2 {
                        best = (x, y, v);
                    }
                }
            }
            cx = best.0;
            cy = best.1;
            half /= 40.0;
        }
        (best.0, best.1)
    }

    #[test]
    fn constrained_rosenbrock_matches_grid_search() {
        let p = rosenbrock();
        let sol = solve(&p, &[0.2, 0.2], None, &NLPOptions { max_iter: 2000, ..Default::default() })
            .unwrap();
        let (gx, gy) = rosenbrock_grid_oracle();
        assert!((sol.x[0] - gx).abs() < 1e-4, "x {} vs grid {}", sol.x[0], gx);
        assert!((sol.x[1] - gy).abs() < 1e-4, "y {} vs grid {}", sol.x[1], gy);
    }

    #[test]
    fn penalty_solver_agrees_with_interior_point() {
        for (p, x0) in [(eq_qp(), vec![0.0, 0.0]), (rosenbrock(), vec![0.2, 0.2])] {
            let ip = solve(&p, &x0, None, &NLPOptions { max_iter: 2000, ..Default::default() })
                .unwrap();
            let pn = solve_penalty(&p, &x0, 1e10).unwrap();
            for (a, b) in ip.x.iter().zip(&pn) {
                assert!((a - b).abs() < 1e-6, "ip {a} vs penalty {b}");
            }
        }
    }

    #[test]
    fn merit_decreases_within_each_barrier_stage() {
        let p = rosenbrock();
        let sol = solve(&p, &[0.2, 0.2], None, &NLPOptions { max_iter: 2000, ..Default::default() })
            .unwrap();
        for w in sol.merit_log.windows(2) {
            let ((mu0, nu0, m0), (mu1, nu1, m1)) = (w[0], w[1]);
            if mu0 == mu1 && nu0 == nu1 {
                assert!(m1 <= m0 + 1e-12, "merit rose from {m0} to {m1}");
            }
            assert!(mu1 <= mu0, "barrier parameter increased");
        }
    }

    #[test]
    fn bfgs_fallback_without_hessian() {
        let mut p = eq_qp();
        p.lag_hessian = None;
        let sol = solve(&p, &[0.0, 0.0], None, &NLPOptions { max_iter: 2000, ..Default::default() })
            .unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-7);
        assert!((sol.x[1] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn infeasible_start_recovers() {
        let p = rosenbrock();
        // Start far outside the feasible set.
        let sol = solve(&p, &[5.0, 5.0], None, &NLPOptions { max_iter: 2000, ..Default::default() })
            .unwrap();
        assert!(sol.x[0] + sol.x[1] <= 1.0 + 1e-7);
        assert!(sol.x[0] >= -1e-9 && sol.x[1] >= -1e-9);
    }
}
