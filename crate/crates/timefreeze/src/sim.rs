//! Two independent integrators for the clock-augmented system.
//!
//! The event-driven integrator advances one smooth mode at a time with an
//! adaptive embedded Runge-Kutta pair, locates switching-function zeros on
//! the dense output, and uses the closed-form mode logic (sliding
//! multipliers, auxiliary jumps) at the transitions.
//!
//! The second integrator discretizes the algebraic complementarity
//! encoding with Radau IIA collocation, relaxing each complementarity pair
//! to a positive product driven to zero by a homotopy; element lengths
//! become unknowns when a switch is detected inside an element so the grid
//! lands exactly on the switch.

use crate::diffkit::{jacobian, solve_dense, Dual, Scalar};
use crate::error::{Error, Result};
use crate::model::CLSDynamics;
use crate::reform::{DCSystem, SurfaceClass, SystemKind, TimeFreezingSystem};

// ---------------------------------------------------------------------------
// Controls

/// Control signal as a function of *physical* time (the clock state),
/// with an optional per-time speed factor scaling the whole vector field.
pub trait Control: Send + Sync {
    fn eval(&self, t: f64) -> Vec<f64>;
    /// Physical times at which the signal is not smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
    /// Speed-of-time factor multiplying the right-hand side.
    fn speed(&self, _t: f64) -> f64 {
        1.0
    }
}

pub struct ConstControl(pub Vec<f64>);

impl Control for ConstControl {
    fn eval(&self, _t: f64) -> Vec<f64> {
        self.0.clone()
    }
}

/// Piecewise-constant control (and speed) on a uniform physical-time grid,
/// as produced by the optimal control pipeline.
pub struct GridControl {
    pub t_grid: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
}

impl GridControl {
    fn interval(&self, t: f64) -> usize {
        match self
            .t_grid
            .iter()
            .rposition(|&tk| t >= tk - 1e-12)
        {
            Some(k) => k.min(self.u.len() - 1),
            None => 0,
        }
    }
}

impl Control for GridControl {
    fn eval(&self, t: f64) -> Vec<f64> {
        self.u[self.interval(t)].clone()
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.t_grid[1..].to_vec()
    }
    fn speed(&self, t: f64) -> f64 {
        self.s[self.interval(t)]
    }
}

// ---------------------------------------------------------------------------
// Trajectory

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeLabel {
    Unconstrained,
    Sliding,
    Aux,
    AuxTangPlus,
    AuxTangMinus,
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub start_index: usize,
    pub end_index: usize,
    pub mode: ModeLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Touchdown,
    JumpComplete,
    Liftoff,
    StickSlip,
}

#[derive(Clone, Debug)]
pub struct Event {
    pub tau: f64,
    pub kind: EventKind,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub tau_grid: Vec<f64>,
    pub y_samples: Vec<Vec<f64>>,
    /// Filippov weights at each sample (unit vectors inside regions).
    pub theta_samples: Vec<Vec<f64>>,
    /// Full algebraic vectors when produced by the collocation integrator.
    pub z_samples: Option<Vec<Vec<f64>>>,
    pub segments: Vec<Segment>,
    pub events: Vec<Event>,
    /// Final complementarity residual (collocation integrator only).
    pub comp_residual: f64,
}

impl Trajectory {
    pub fn terminal_y(&self) -> &[f64] {
        self.y_samples.last().expect("empty trajectory")
    }
}

// ---------------------------------------------------------------------------
// Implicit Runge-Kutta kernel (Radau IIA, 1-3 stages)

pub struct RadauTableau {
    pub s: usize,
    /// Row-major s x s coefficient matrix; the last row are the weights.
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub order: usize,
}

pub fn radau_iia(stages: usize) -> RadauTableau {
    let r6 = 6.0_f64.sqrt();
    match stages {
        1 => RadauTableau {
            s: 1,
            a: vec![1.0],
            c: vec![1.0],
            order: 1,
        },
        2 => RadauTableau {
            s: 2,
            a: vec![5.0 / 12.0, -1.0 / 12.0, 3.0 / 4.0, 1.0 / 4.0],
            c: vec![1.0 / 3.0, 1.0],
            order: 3,
        },
        3 => RadauTableau {
            s: 3,
            a: vec![
                (88.0 - 7.0 * r6) / 360.0,
                (296.0 - 169.0 * r6) / 1800.0,
                (-2.0 + 3.0 * r6) / 225.0,
                (296.0 + 169.0 * r6) / 1800.0,
                (88.0 + 7.0 * r6) / 360.0,
                (-2.0 - 3.0 * r6) / 225.0,
                (16.0 - r6) / 36.0,
                (16.0 + r6) / 36.0,
                1.0 / 9.0,
            ],
            c: vec![(4.0 - r6) / 10.0, (4.0 + r6) / 10.0, 1.0],
            order: 5,
        },
        _ => panic!("only 1-3 stages supported"),
    }
}

/// Autonomous smooth right-hand side, evaluable at any scalar so the
/// stage Newton iteration can differentiate it.
pub trait OdeRhs {
    fn dim(&self) -> usize;
    fn eval<S: Scalar>(&self, y: &[S]) -> Vec<S>;
}

/// One implicit Runge-Kutta step with a full Newton iteration on the
/// stage states, to residual 1e-12.
pub fn rk_smooth_step<R: OdeRhs>(rhs: &R, y: &[f64], h: f64, stages: usize) -> Result<Vec<f64>> {
    let tab = radau_iia(stages);
    let n = rhs.dim();
    let s = tab.s;
    // Stage states, initialized at y.
    let mut stage: Vec<f64> = (0..s).flat_map(|_| y.iter().copied()).collect();
    for _ in 0..100 {
        let f_stage: Vec<Vec<f64>> = (0..s).map(|j| rhs.eval(&stage[j * n..(j + 1) * n])).collect();
        let mut res = vec![0.0; s * n];
        for i in 0..s {
            for k in 0..n {
                let mut acc = stage[i * n + k] - y[k];
                for j in 0..s {
                    acc -= h * tab.a[i * s + j] * f_stage[j][k];
                }
                res[i * n + k] = acc;
            }
        }
        let rnorm = res.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if rnorm <= 1e-12 {
            return Ok(stage[(s - 1) * n..].to_vec());
        }
        let jacs: Vec<Vec<Vec<f64>>> =
            (0..s).map(|j| jacobian(|yy| rhs.eval(yy), &stage[j * n..(j + 1) * n])).collect();
        let mut mat = vec![0.0; (s * n) * (s * n)];
        for i in 0..s {
            for j in 0..s {
                for r in 0..n {
                    for col in 0..n {
                        let mut v = -h * tab.a[i * s + j] * jacs[j][r][col];
                        if i == j && r == col {
                            v += 1.0;
                        }
                        mat[(i * n + r) * (s * n) + (j * n + col)] = v;
                    }
                }
            }
        }
        let mut step = res;
        solve_dense(&mut mat, &mut step, s * n)?;
        for (xi, di) in stage.iter_mut().zip(&step) {
            *xi -= di;
        }
    }
    Err(Error::NewtonDiverged {
        residual: f64::NAN,
        sigma: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Adaptive explicit pair with dense output (Dormand-Prince 5(4))

struct DenseStep {
    tau0: f64,
    h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    fn eval(&self, tau: f64) -> Vec<f64> {
        let th = ((tau - self.tau0) / self.h).clamp(0.0, 1.0);
        let th1 = 1.0 - th;
        (0..self.rcont[0].len())
            .map(|i| {
                self.rcont[0][i]
                    + th
                        * (self.rcont[1][i]
                            + th1
                                * (self.rcont[2][i]
                                    + th * (self.rcont[3][i] + th1 * self.rcont[4][i])))
            })
            .collect()
    }
}

/// One adaptive attempt; returns (accepted, h_used, y_new, dense, h_next).
fn dopri5_step(
    f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    tau: f64,
    y: &[f64],
    h: f64,
    rtol: f64,
    atol: f64,
) -> Result<(bool, Vec<f64>, DenseStep, f64)> {
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];
    let n = y.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    k.push(f(y)?);
    for st in 0..6 {
        let mut ys = y.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = A[st][j];
            if a != 0.0 {
                for i in 0..n {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        k.push(f(&ys)?);
    }
    // k[6] is evaluated at the 5th-order solution (FSAL structure).
    let y1: Vec<f64> = (0..n)
        .map(|i| {
            y[i] + h
                * (A[5][0] * k[0][i]
                    + A[5][2] * k[2][i]
                    + A[5][3] * k[3][i]
                    + A[5][4] * k[4][i]
                    + A[5][5] * k[5][i])
        })
        .collect();
    let mut err = 0.0_f64;
    for i in 0..n {
        let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * h;
        let sc = atol + rtol * y[i].abs().max(y1[i].abs());
        err += (e / sc) * (e / sc);
    }
    let err = (err / n as f64).sqrt();
    let accepted = err <= 1.0;
    let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
    let h_next = h * fac;
    // Dense output coefficients.
    let ydiff: Vec<f64> = (0..n).map(|i| y1[i] - y[i]).collect();
    let bspl: Vec<f64> = (0..n).map(|i| h * k[0][i] - ydiff[i]).collect();
    let rcont = [
        y.to_vec(),
        ydiff.clone(),
        bspl.clone(),
        (0..n).map(|i| ydiff[i] - h * k[6][i] - bspl[i]).collect(),
        (0..n)
            .map(|i| h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>())
            .collect(),
    ];
    Ok((
        accepted,
        y1,
        DenseStep {
            tau0: tau,
            h,
            rcont,
        },
        h_next,
    ))
}

// ---------------------------------------------------------------------------
// Event-driven integrator

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_events: usize,
    /// Switching-function value tolerance at located events.
    pub event_tol: f64,
    /// Bracket width tolerance in numerical time.
    pub bracket_tol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 1e-3,
            h_max: 0.05,
            max_events: 10_000,
            event_tol: 1e-10,
            bracket_tol: 1e-13,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Free,
    /// tang: +1/-1 slipping direction, 0 stick (or frictionless).
    Slide { tang: i8 },
    /// tang: sign of the active tangential auxiliary field, 0 none.
    Aux { tang: i8 },
}

impl Mode {
    fn label(self) -> ModeLabel {
        match self {
            Mode::Free => ModeLabel::Unconstrained,
            Mode::Slide { .. } => ModeLabel::Sliding,
            Mode::Aux { tang: 1 } => ModeLabel::AuxTangPlus,
            Mode::Aux { tang: -1 } => ModeLabel::AuxTangMinus,
            Mode::Aux { .. } => ModeLabel::Aux,
        }
    }
}

struct EventFn<'a> {
    kind: Option<EventKind>,
    g: Box<dyn Fn(&[f64]) -> f64 + 'a>,
    armed: bool,
    last: f64,
}

pub fn simulate_event_driven<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    y0: &[f64],
    ctrl: &dyn Control,
    tau_f: f64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    let nq = sys.n_q();
    let t_idx = 2 * nq;
    let mut traj = Trajectory::default();
    let mut tau = 0.0;
    let mut y = y0.to_vec();
    let mut n_events = 0usize;

    // Initial mode from the state.
    let u_init = ctrl.eval(y[t_idx]);
    let mut mode = classify_state(sys, &y, &u_init, 0)?;

    let theta_of = |mode: Mode, y: &[f64]| -> Result<Vec<f64>> {
        let u = ctrl.eval(y[t_idx]);
        let (q, v, _) = sys.split(y);
        Ok(match mode {
            Mode::Free => {
                let mut th = vec![0.0; sys.n_f];
                th[0] = 1.0;
                th
            }
            Mode::Slide { tang } => sys.sliding_multipliers(q, v, &u, Some(tang as f64))?,
            Mode::Aux { tang } => {
                let mut th = vec![0.0; sys.n_f];
                match tang {
                    1 => th[1] = 1.0,
                    -1 => th[2] = 1.0,
                    _ => {
                        if sys.n_f == 2 {
                            th[1] = 1.0;
                        } else {
                            th[1] = 0.5;
                            th[2] = 0.5;
                        }
                    }
                }
                th
            }
        })
    };

    let push_sample =
        |traj: &mut Trajectory, tau: f64, y: &[f64], th: Vec<f64>| {
            traj.tau_grid.push(tau);
            traj.y_samples.push(y.to_vec());
            traj.theta_samples.push(th);
        };

    push_sample(&mut traj, tau, &y, theta_of(mode, &y)?);
    let mut seg_start = 0usize;

    'modes: loop {
        // Right-hand side of the current mode.
        let rhs_mode = mode;
        let mut rhs = |yy: &[f64]| -> Result<Vec<f64>> {
            let t = yy[t_idx];
            let u = ctrl.eval(t);
            let s = ctrl.speed(t);
            let f = match rhs_mode {
                Mode::Free => sys.f_smooth(yy, &u),
                Mode::Slide { tang } => {
                    let (q, v, _) = sys.split(yy);
                    let th = sys.sliding_multipliers(q, v, &u, Some(tang as f64))?;
                    sys.rhs(yy, &u, &th)?
                }
                Mode::Aux { tang } => aux_field(sys, yy, tang)?,
            };
            Ok(f.into_iter().map(|x| x * s).collect())
        };

        // Switching functions watched in this mode.
        let mut events = build_events(sys, ctrl, mode, &y);
        for ev in events.iter_mut() {
            ev.last = (ev.g)(&y);
            ev.armed = ev.last.abs() > 1e-8;
        }

        let mut h = opts.h_init.min(tau_f - tau);
        loop {
            if tau >= tau_f - 1e-14 {
                break 'modes;
            }
            h = h.min(opts.h_max).min(tau_f - tau).max(1e-14);
            let (accepted, y1, dense, h_next) = dopri5_step(&mut rhs, tau, &y, h, opts.rtol, opts.atol)?;
            if !accepted {
                h = h_next;
                continue;
            }

            // Earliest event inside the accepted step.
            let mut hit: Option<(f64, usize)> = None;
            for (ei, ev) in events.iter_mut().enumerate() {
                let g1 = (ev.g)(&y1);
                if !ev.armed {
                    if g1.abs() > 1e-8 {
                        ev.armed = true;
                        ev.last = g1;
                    }
                    continue;
                }
                if ev.last * g1 < 0.0 {
                    let tau_star = locate(&dense, &ev.g, tau, tau + dense.h, opts)?;
                    if hit.map_or(true, |(tb, _)| tau_star < tb) {
                        hit = Some((tau_star, ei));
                    }
                } else {
                    ev.last = g1;
                }
            }

            if let Some((tau_star, ei)) = hit {
                let y_star = dense.eval(tau_star);
                tau = tau_star;
                y = y_star;
                // Close the segment at the event point.
                push_sample(&mut traj, tau, &y, theta_of(mode, &y).unwrap_or_else(|_| {
                    let mut th = vec![0.0; sys.n_f];
                    th[0] = 1.0;
                    th
                }));
                let kind = events[ei].kind;
                if let Some(k) = kind {
                    traj.events.push(Event { tau, kind: k });
                    n_events += 1;
                    if n_events > opts.max_events {
                        return Err(Error::MaxEventsExceeded(opts.max_events));
                    }
                }
                let end = traj.tau_grid.len() - 1;
                traj.segments.push(Segment {
                    start_index: seg_start,
                    end_index: end,
                    mode: mode.label(),
                });
                seg_start = end;
                mode = transition(sys, ctrl, mode, kind, &mut y)?;
                continue 'modes;
            }

            tau += dense.h;
            y = y1;
            if let Mode::Slide { .. } = mode {
                project_normal_velocity(sys, &mut y);
            }
            push_sample(&mut traj, tau, &y, theta_of(mode, &y)?);
            h = h_next;
        }
    }

    let end = traj.tau_grid.len() - 1;
    if end > seg_start {
        traj.segments.push(Segment {
            start_index: seg_start,
            end_index: end,
            mode: mode.label(),
        });
    }
    Ok(traj)
}

/// Remove the residual normal-velocity drift accumulated while sliding.
fn project_normal_velocity<D: CLSDynamics>(sys: &TimeFreezingSystem<D>, y: &mut [f64]) {
    let nq = sys.n_q();
    let (q, v, _) = sys.split(y);
    let q = q.to_vec();
    let n = sys.model.normal(&q);
    let mut m = sys.model.dynamics.mass(&q);
    let mut w = n.clone();
    if solve_dense(&mut m, &mut w, nq).is_err() {
        return;
    }
    let d: f64 = n.iter().zip(&w).map(|(a, b)| a * b).sum();
    let nv: f64 = n.iter().zip(v).map(|(a, b)| a * b).sum();
    let coef = nv / d;
    for i in 0..nq {
        y[nq + i] -= coef * w[i];
    }
}

fn aux_field<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    y: &[f64],
    tang: i8,
) -> Result<Vec<f64>> {
    if sys.n_f == 2 || tang == 0 {
        return sys.f_aux_normal(y);
    }
    let cols = sys.modes(y, &vec![0.0; sys.model.n_u()])?;
    Ok(if tang > 0 { cols[1].clone() } else { cols[2].clone() })
}

fn classify_state<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    y: &[f64],
    u: &[f64],
    tang_hint: i8,
) -> Result<Mode> {
    match sys.surface_classification(y, u)? {
        SurfaceClass::SlideStable => {
            let mode_tang = slide_tang(sys, y, u, tang_hint)?;
            Ok(Mode::Slide { tang: mode_tang })
        }
        SurfaceClass::Leaving | SurfaceClass::Crossing => Ok(Mode::Free),
        SurfaceClass::AuxEnter => Ok(Mode::Aux {
            tang: aux_tang(sys, y),
        }),
    }
}

fn slide_tang<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    y: &[f64],
    u: &[f64],
    hint: i8,
) -> Result<i8> {
    if sys.kind == SystemKind::Frictionless {
        return Ok(0);
    }
    let (q, v, _) = sys.split(y);
    let c = sys.c(y);
    if sys.kind == SystemKind::Planar && c[2].abs() <= 1e-9 {
        // Stick if feasible, else slip with the sign of the freed motion.
        match sys.try_stick_multipliers(q, v, u) {
            Ok(_) => Ok(0),
            Err(Error::StickInfeasible { value }) => {
                if hint != 0 {
                    Ok(hint)
                } else {
                    Ok(if value > 0.0 { 1 } else { -1 })
                }
            }
            Err(e) => Err(e),
        }
    } else {
        Ok(if c[2] > 0.0 { 1 } else { -1 })
    }
}

fn aux_tang<D: CLSDynamics>(sys: &TimeFreezingSystem<D>, y: &[f64]) -> i8 {
    if sys.n_f == 2 {
        return 0;
    }
    let c = sys.c(y);
    if c[2] > 1e-10 {
        1
    } else if c[2] < -1e-10 {
        -1
    } else {
        0
    }
}

fn build_events<'a, D: CLSDynamics>(
    sys: &'a TimeFreezingSystem<D>,
    ctrl: &'a dyn Control,
    mode: Mode,
    y: &[f64],
) -> Vec<EventFn<'a>> {
    let nq = sys.n_q();
    let t_idx = 2 * nq;
    let mut evs: Vec<EventFn<'a>> = Vec::new();
    match mode {
        Mode::Free => {
            evs.push(EventFn {
                kind: Some(EventKind::Touchdown),
                g: Box::new(move |yy: &[f64]| sys.model.dynamics.gap(&yy[..nq])),
                armed: false,
                last: 0.0,
            });
        }
        Mode::Slide { tang } => {
            // Contact-breaking test: gap acceleration through zero.
            evs.push(EventFn {
                kind: Some(EventKind::Liftoff),
                g: Box::new(move |yy: &[f64]| {
                    let (q, v, _) = sys.split(yy);
                    let u = ctrl.eval(yy[t_idx]);
                    sys.model
                        .contact_quantities(q, v, &u)
                        .map(|cq| cq.phi)
                        .unwrap_or(0.0)
                }),
                armed: false,
                last: 0.0,
            });
            if sys.kind == SystemKind::Planar {
                if tang != 0 {
                    // Slip ends when the tangential velocity stops.
                    evs.push(EventFn {
                        kind: Some(EventKind::StickSlip),
                        g: Box::new(move |yy: &[f64]| sys.c(yy)[2]),
                        armed: false,
                        last: 0.0,
                    });
                } else {
                    // Stick ends when a stick weight would turn negative.
                    for pick in [1usize, 2usize] {
                        evs.push(EventFn {
                            kind: Some(EventKind::StickSlip),
                            g: Box::new(move |yy: &[f64]| {
                                let (q, v, _) = sys.split(yy);
                                let u = ctrl.eval(yy[t_idx]);
                                match sys.try_stick_multipliers(q, v, u.as_slice()) {
                                    Ok(th) => th[pick],
                                    Err(_) => -1.0,
                                }
                            }),
                            armed: false,
                            last: 0.0,
                        });
                    }
                }
            }
        }
        Mode::Aux { tang } => {
            evs.push(EventFn {
                kind: Some(EventKind::JumpComplete),
                g: Box::new(move |yy: &[f64]| sys.c(yy)[1]),
                armed: false,
                last: 0.0,
            });
            if sys.n_f == 3 && tang != 0 {
                evs.push(EventFn {
                    kind: Some(EventKind::StickSlip),
                    g: Box::new(move |yy: &[f64]| sys.c(yy)[2]),
                    armed: false,
                    last: 0.0,
                });
            }
        }
    }
    // Control breakpoints (in physical time) restart the smooth segment.
    let t_now = y[t_idx];
    for tb in ctrl.breakpoints() {
        if tb > t_now + 1e-12 {
            evs.push(EventFn {
                kind: None,
                g: Box::new(move |yy: &[f64]| yy[t_idx] - tb),
                armed: false,
                last: 0.0,
            });
        }
    }
    evs
}

fn locate(
    dense: &DenseStep,
    g: &dyn Fn(&[f64]) -> f64,
    mut lo: f64,
    mut hi: f64,
    opts: &SimOptions,
) -> Result<f64> {
    let mut glo = g(&dense.eval(lo));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(&dense.eval(mid));
        if gm.abs() <= opts.event_tol && (hi - lo) <= opts.bracket_tol.max(1e-15) {
            return Ok(mid);
        }
        if glo * gm <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            glo = gm;
        }
        if (hi - lo) <= opts.bracket_tol.max(f64::EPSILON * hi.abs()) {
            let gh = g(&dense.eval(hi));
            if gh.abs() <= 1e-8 {
                return Ok(hi);
            }
            return Ok(hi);
        }
    }
    Err(Error::NonconvergedRootfind(
        "bisection failed to localize the switching point".into(),
    ))
}

fn transition<D: CLSDynamics>(
    sys: &TimeFreezingSystem<D>,
    ctrl: &dyn Control,
    mode: Mode,
    kind: Option<EventKind>,
    y: &mut Vec<f64>,
) -> Result<Mode> {
    let t_idx = 2 * sys.n_q();
    let u = ctrl.eval(y[t_idx]);
    match kind {
        None => Ok(mode), // control breakpoint: same mode, fresh segment
        Some(EventKind::Touchdown) => Ok(Mode::Aux {
            tang: aux_tang(sys, y),
        }),
        Some(EventKind::JumpComplete) => {
            project_normal_velocity(sys, y);
            classify_state(sys, y, &u, 0)
        }
        Some(EventKind::Liftoff) => Ok(Mode::Free),
        Some(EventKind::StickSlip) => match mode {
            Mode::Aux { .. } => {
                // Tangential velocity stopped mid-jump: normal push only.
                Ok(Mode::Aux { tang: 0 })
            }
            Mode::Slide { tang } => {
                if tang != 0 {
                    // Slip stopped; zero the tangential velocity exactly
                    // and try stick.
                    let hint = tang;
                    let tang_new = slide_tang(sys, y, &u, hint)?;
                    Ok(Mode::Slide { tang: tang_new })
                } else {
                    // Stick became infeasible; slip in the freed direction.
                    let tang_new = slide_tang(sys, y, &u, 0)?;
                    Ok(Mode::Slide { tang: tang_new })
                }
            }
            Mode::Free => Ok(Mode::Free),
        },
    }
}

// ---------------------------------------------------------------------------
// Collocation integrator on the algebraic encoding

#[derive(Clone, Debug)]
pub struct DcsOptions {
    pub n_steps: usize,
    pub n_stages: usize,
    pub sigma0: f64,
    pub sigma_min: f64,
    pub sigma_factor: f64,
    pub align: bool,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for DcsOptions {
    fn default() -> Self {
        DcsOptions {
            n_steps: 100,
            n_stages: 3,
            sigma0: 1.0,
            sigma_min: 1e-9,
            sigma_factor: 10.0,
            align: true,
            newton_tol: 1e-10,
            max_newton: 60,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum AlignTarget {
    /// Land the element end on c_i(y) = 0.
    Switch(usize),
    /// Land the element end on t = value (control breakpoint).
    Clock(f64),
}

struct ElementSolution {
    /// Stage unknowns, per stage [y; z].
    w: Vec<f64>,
    h: f64,
    comp_residual: f64,
}

fn solve_element<D: CLSDynamics>(
    dcs: &DCSystem<D>,
    tab: &RadauTableau,
    y0: &[f64],
    ctrl: &dyn Control,
    h0: f64,
    opts: &DcsOptions,
    align: Option<AlignTarget>,
    warm: Option<&[f64]>,
) -> Result<ElementSolution> {
    let sys = &dcs.sys;
    let n_y = sys.n_y;
    let n_z = dcs.n_z();
    let n_st = n_y + n_z;
    let s = tab.s;
    let n_f = dcs.n_f;
    let n_c = dcs.n_c;
    let t_idx = n_y - 1;
    let with_h = align.is_some();
    let n_tot = s * n_st + if with_h { 1 } else { 0 };

    // Initial stage vector.
    let mut w: Vec<f64> = match warm {
        Some(prev) => prev[..s * n_st].to_vec(),
        None => {
            let mut z0 = dcs.consistent_z(y0, &[]);
            // Keep the step values strictly interior for the first, very
            // relaxed solve.
            for i in n_f..n_f + n_c {
                z0[i] = 0.1 + 0.8 * z0[i];
            }
            for i in n_f + n_c..n_f + 3 * n_c {
                z0[i] = z0[i].max(0.1);
            }
            let mut w = Vec::with_capacity(s * n_st);
            for _ in 0..s {
                w.extend_from_slice(y0);
                w.extend_from_slice(&z0);
            }
            w
        }
    };
    let mut h = h0;

    // One stage's differential+algebraic residual minus the collocation
    // coupling, with its Jacobian in the stage's own unknowns.
    let stage_rows = n_y + n_f + n_c + 2 * n_c;
    let eval_stage = |x: &[Dual<f64>], u: &[f64], sp: f64, sigma: f64| -> Result<Vec<Dual<f64>>> {
        let y = &x[..n_y];
        let z = &x[n_y..];
        let (theta, alpha, lp, ln_) = dcs.split_z(z);
        let ul: Vec<Dual<f64>> = u.iter().map(|&v| Dual::constant(v)).collect();
        let mut f = dcs.ode_rhs(y, &ul, theta)?;
        for fi in f.iter_mut() {
            *fi = fi.scale(sp);
        }
        let mut rows = f;
        rows.extend(dcs.g_f(theta, alpha));
        rows.extend(dcs.switch_link(y, lp, ln_));
        for i in 0..n_c {
            rows.push(alpha[i].clone() * ln_[i].clone() - Dual::constant(sigma));
        }
        for i in 0..n_c {
            rows.push((Dual::constant(1.0) - alpha[i].clone()) * lp[i].clone() - Dual::constant(sigma));
        }
        Ok(rows)
    };

    let mut sigma = opts.sigma0;
    let mut comp_residual;
    loop {
        let tol = if sigma <= opts.sigma_min * 1.0001 {
            opts.newton_tol
        } else {
            (sigma * 1e-3).max(opts.newton_tol)
        };
        let mut converged = false;
        for _ in 0..opts.max_newton {
            // Per-stage values and Jacobians.
            let mut vals: Vec<Vec<f64>> = Vec::with_capacity(s);
            let mut jacs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(s);
            for j in 0..s {
                let xj = &w[j * n_st..(j + 1) * n_st];
                let tj = xj[t_idx];
                let uj = ctrl.eval(tj);
                let spj = ctrl.speed(tj);
                let rows = jacobian(
                    |xd: &[Dual<f64>]| {
                        eval_stage(xd, &uj, spj, sigma).expect("stage evaluation failed")
                    },
                    xj,
                );
                let xl: Vec<Dual<f64>> = xj.iter().map(|&v| Dual::lift(v)).collect();
                let v = eval_stage(&xl, &uj, spj, sigma)?;
                vals.push(v.iter().map(|d| d.val()).collect());
                jacs.push(rows);
            }

            // Assemble global residual and Jacobian.
            let mut res = vec![0.0; n_tot];
            let mut mat = vec![0.0; n_tot * n_tot];
            for i in 0..s {
                // Differential rows.
                for r in 0..n_y {
                    let mut acc = w[i * n_st + r] - y0[r];
                    for j in 0..s {
                        acc -= h * tab.a[i * s + j] * vals[j][r];
                    }
                    res[i * n_st + r] = acc;
                    for j in 0..s {
                        for col in 0..n_st {
                            let mut v = -h * tab.a[i * s + j] * jacs[j][r][col];
                            if i == j && col == r {
                                v += 1.0;
                            }
                            mat[(i * n_st + r) * n_tot + j * n_st + col] += v;
                        }
                    }
                    if with_h {
                        let dh: f64 = (0..s).map(|j| -tab.a[i * s + j] * vals[j][r]).sum();
                        mat[(i * n_st + r) * n_tot + n_tot - 1] = dh;
                    }
                }
                // Algebraic rows (stage-local).
                for r in n_y..stage_rows {
                    let gr = i * n_st + n_y + (r - n_y);
                    res[gr] = vals[i][r];
                    for col in 0..n_st {
                        mat[gr * n_tot + i * n_st + col] = jacs[i][r][col];
                    }
                }
            }
            if let Some(target) = align {
                let last = &w[(s - 1) * n_st..(s - 1) * n_st + n_y];
                let gr = n_tot - 1;
                match target {
                    AlignTarget::Switch(ci) => {
                        let grad = crate::diffkit::gradient(
                            |yd: &[Dual<f64>]| sys.c(yd)[ci].clone(),
                            last,
                        );
                        res[gr] = sys.c(last)[ci];
                        for col in 0..n_y {
                            mat[gr * n_tot + (s - 1) * n_st + col] = grad[col];
                        }
                    }
                    AlignTarget::Clock(tb) => {
                        res[gr] = last[t_idx] - tb;
                        mat[gr * n_tot + (s - 1) * n_st + t_idx] = 1.0;
                    }
                }
            }

            let rnorm = res.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if rnorm <= tol {
                converged = true;
                break;
            }
            if !rnorm.is_finite() {
                return Err(Error::NewtonDiverged {
                    residual: rnorm,
                    sigma,
                });
            }
            let last_res = rnorm;
            let mut step = res.clone();
            solve_dense(&mut mat, &mut step, n_tot)?;

            // Fraction-to-boundary cap: never let a bounded variable lose
            // more than 99.5% of its distance to its bound in one step.
            // Hard clamping instead would pin variables on the bound and
            // deadlock against the relaxed complementarity rows.
            let mut ftb = 1.0f64;
            for j in 0..s {
                let zoff = j * n_st + n_y;
                for i in 0..n_c {
                    let a = w[zoff + n_f + i];
                    let d = step[zoff + n_f + i];
                    if d > 0.0 {
                        ftb = ftb.min(0.995 * a / d);
                    } else if d < 0.0 {
                        ftb = ftb.min(0.995 * (1.0 - a) / (-d));
                    }
                }
                for i in 0..2 * n_c {
                    let l = w[zoff + n_f + n_c + i];
                    let d = step[zoff + n_f + n_c + i];
                    if d > 0.0 {
                        ftb = ftb.min(0.995 * l / d);
                    }
                }
            }
            let mut damping = ftb.clamp(1e-8, 1.0);
            for _try in 0..12 {
                let mut w_new = w.clone();
                for i in 0..s * n_st {
                    w_new[i] -= damping * step[i];
                }
                let mut h_new = h;
                if with_h {
                    h_new = (h - damping * step[n_tot - 1]).clamp(1e-8, h0);
                }
                // Nonmonotone acceptance: reject only genuine blow-ups.
                // Near mode-transition kinks the residual can rise before it
                // drops, and a monotone line search stalls there.
                let probe = residual_norm(dcs, tab, y0, ctrl, &w_new, h_new, sigma, align)?;
                if (probe.is_finite() && probe < 10.0 * last_res.max(sigma)) || _try == 11 {
                    w = w_new;
                    h = h_new;
                    break;
                }
                damping *= 0.5;
            }
        }
        if !converged {
            let rn = residual_norm(dcs, tab, y0, ctrl, &w, h, sigma, align)?;
            return Err(Error::NewtonDiverged { residual: rn, sigma });
        }
        // Track the exact (unrelaxed) complementarity violation.
        comp_residual = 0.0f64;
        for j in 0..s {
            let z = &w[j * n_st + n_y..(j + 1) * n_st];
            let (_, alpha, lp, ln_) = dcs.split_z(z);
            for i in 0..n_c {
                comp_residual = comp_residual
                    .max(alpha[i] * ln_[i])
                    .max((1.0 - alpha[i]) * lp[i]);
            }
        }
        if sigma <= opts.sigma_min * 1.0001 {
            break;
        }
        sigma = (sigma / opts.sigma_factor).max(opts.sigma_min);
    }
    Ok(ElementSolution {
        w,
        h,
        comp_residual,
    })
}

#[allow(clippy::too_many_arguments)]
fn residual_norm<D: CLSDynamics>(
    dcs: &DCSystem<D>,
    tab: &RadauTableau,
    y0: &[f64],
    ctrl: &dyn Control,
    w: &[f64],
    h: f64,
    sigma: f64,
    align: Option<AlignTarget>,
) -> Result<f64> {
    let sys = &dcs.sys;
    let n_y = sys.n_y;
    let n_z = dcs.n_z();
    let n_st = n_y + n_z;
    let s = tab.s;
    let n_c = dcs.n_c;
    let t_idx = n_y - 1;
    let mut fs: Vec<Vec<f64>> = Vec::with_capacity(s);
    let mut algs: Vec<Vec<f64>> = Vec::with_capacity(s);
    for j in 0..s {
        let y = &w[j * n_st..j * n_st + n_y];
        let z = &w[j * n_st + n_y..(j + 1) * n_st];
        let (theta, alpha, lp, ln_) = dcs.split_z(z);
        let u = ctrl.eval(y[t_idx]);
        let sp = ctrl.speed(y[t_idx]);
        let mut f = dcs.ode_rhs(y, &u, theta)?;
        for fi in f.iter_mut() {
            *fi *= sp;
        }
        fs.push(f);
        let mut a = dcs.g_f(theta, alpha);
        a.extend(dcs.switch_link(y, lp, ln_));
        for i in 0..n_c {
            a.push(alpha[i] * ln_[i] - sigma);
        }
        for i in 0..n_c {
            a.push((1.0 - alpha[i]) * lp[i] - sigma);
        }
        algs.push(a);
    }
    let mut m = 0.0f64;
    for i in 0..s {
        for r in 0..n_y {
            let mut acc = w[i * n_st + r] - y0[r];
            for j in 0..s {
                acc -= h * tab.a[i * s + j] * fs[j][r];
            }
            m = m.max(acc.abs());
        }
        for v in &algs[i] {
            m = m.max(v.abs());
        }
    }
    if let Some(target) = align {
        let last = &w[(s - 1) * n_st..(s - 1) * n_st + n_y];
        match target {
            AlignTarget::Switch(ci) => m = m.max(dcs.sys.c(last)[ci].abs()),
            AlignTarget::Clock(tb) => m = m.max((last[t_idx] - tb).abs()),
        }
    }
    Ok(m)
}

pub fn simulate_dcs<D: CLSDynamics>(
    dcs: &DCSystem<D>,
    y0: &[f64],
    ctrl: &dyn Control,
    tau_f: f64,
    opts: &DcsOptions,
) -> Result<Trajectory> {
    let tab = radau_iia(opts.n_stages);
    let sys = &dcs.sys;
    let n_y = sys.n_y;
    let n_z = dcs.n_z();
    let n_st = n_y + n_z;
    let t_idx = n_y - 1;
    let mut traj = Trajectory {
        z_samples: Some(vec![]),
        ..Default::default()
    };
    let push = |traj: &mut Trajectory, tau: f64, y: &[f64], z: Option<&[f64]>| {
        traj.tau_grid.push(tau);
        traj.y_samples.push(y.to_vec());
        let theta = match z {
            Some(z) => {
                let mut th = z[..dcs.n_f].to_vec();
                if dcs.n_f == 3 {
                    th.swap(1, 2); // algebraic ordering back to mode ordering
                }
                th
            }
            None => {
                let mut th = vec![0.0; dcs.n_f];
                th[0] = 1.0;
                th
            }
        };
        traj.theta_samples.push(theta);
        traj.z_samples
            .as_mut()
            .unwrap()
            .push(z.map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; n_z]));
    };
    push(&mut traj, 0.0, y0, None);

    let breaks = ctrl.breakpoints();
    let mut y = y0.to_vec();
    let mut comp_max = 0.0f64;
    for k in 0..opts.n_steps {
        let tau_a = tau_f * k as f64 / opts.n_steps as f64;
        let tau_b = tau_f * (k + 1) as f64 / opts.n_steps as f64;
        let mut tau = tau_a;
        while tau_b - tau > 1e-12 {
            // Subdivide on Newton failure: a kink inside the element can stall
            // the corrector; halving the step moves it toward a boundary.
            let mut h = tau_b - tau;
            let sol = loop {
                match solve_element(dcs, &tab, &y, ctrl, h, opts, None, None) {
                    Ok(sol) => break sol,
                    Err(Error::NewtonDiverged { .. }) if h > (tau_b - tau_a) / 256.0 => {
                        h *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            };
            let y_end = sol.w[(tab.s - 1) * n_st..(tab.s - 1) * n_st + n_y].to_vec();

            let mut committed = false;
            if opts.align {
                // Detect a switch inside the element: any watched function
                // changing sign between the element endpoints.
                let ca = sys.c(&y);
                let cb = sys.c(&y_end);
                let mut targets: Vec<AlignTarget> = Vec::new();
                for i in 0..dcs.n_c {
                    if ca[i].abs() > 1e-7 && cb[i].abs() > 1e-7 && ca[i] * cb[i] < 0.0 {
                        targets.push(AlignTarget::Switch(i));
                    }
                }
                for &tb in &breaks {
                    if (y[t_idx] - tb) * (y_end[t_idx] - tb) < 0.0 {
                        targets.push(AlignTarget::Clock(tb));
                    }
                }
                if !targets.is_empty() {
                    let mut best: Option<ElementSolution> = None;
                    for target in targets {
                        if let Ok(al) =
                            solve_element(dcs, &tab, &y, ctrl, h, opts, Some(target), Some(&sol.w))
                        {
                            if al.h > 1e-9
                                && al.h < h - 1e-10
                                && best.as_ref().map_or(true, |b| al.h < b.h)
                            {
                                best = Some(al);
                            }
                        }
                    }
                    match best {
                        Some(al) => {
                            let y_al =
                                al.w[(tab.s - 1) * n_st..(tab.s - 1) * n_st + n_y].to_vec();
                            let z_al = al.w[tab.s * n_st - n_z..tab.s * n_st].to_vec();
                            tau += al.h;
                            comp_max = comp_max.max(al.comp_residual);
                            push(&mut traj, tau, &y_al, Some(&z_al));
                            y = y_al;
                            committed = true;
                        }
                        None => {
                            log::warn!(
                                "switch alignment failed near tau = {tau:.6}; keeping unaligned step"
                            );
                        }
                    }
                }
            }
            if !committed {
                let z_end = sol.w[tab.s * n_st - n_z..tab.s * n_st].to_vec();
                comp_max = comp_max.max(sol.comp_residual);
                tau += h;
                push(&mut traj, tau, &y_end, Some(&z_end));
                y = y_end;
            }
        }
    }
    traj.comp_residual = comp_max;
    traj.segments.push(Segment {
        start_index: 0,
        end_index: traj.tau_grid.len() - 1,
        mode: ModeLabel::Unconstrained,
    });
    Ok(traj)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::PointMass2D;
    use crate::model::CLSModel;
    use crate::reform::{build, build_dcs, BuildOptions};
    use std::sync::Arc;

    const G: f64 = 9.81;

    struct Decay;
    impl OdeRhs for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, y: &[S]) -> Vec<S> {
            vec![-y[0].clone()]
        }
    }

    #[test]
    fn radau_step_fixed_point() {
        struct Zero;
        impl OdeRhs for Zero {
            fn dim(&self) -> usize {
                3
            }
            fn eval<S: Scalar>(&self, _y: &[S]) -> Vec<S> {
                vec![S::zero(), S::zero(), S::zero()]
            }
        }
        let y = rk_smooth_step(&Zero, &[1.0, -2.0, 0.5], 0.3, 3).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn radau_step_exponential_accuracy() {
        for (stages, tol) in [(1, 1e-2), (2, 1e-5), (3, 1e-9)] {
            let y = rk_smooth_step(&Decay, &[1.0], 0.1, stages).unwrap();
            let exact = (-0.1f64).exp();
            assert!(
                (y[0] - exact).abs() < tol,
                "{stages} stages: {} vs {exact}",
                y[0]
            );
        }
    }

    #[test]
    fn radau_a_stability_spot_check() {
        struct Stiff;
        impl OdeRhs for Stiff {
            fn dim(&self) -> usize {
                1
            }
            fn eval<S: Scalar>(&self, y: &[S]) -> Vec<S> {
                vec![y[0].scale(-50.0)]
            }
        }
        for stages in 1..=3 {
            for h in [0.1, 1.0, 10.0] {
                let y = rk_smooth_step(&Stiff, &[1.0], h, stages).unwrap();
                assert!(y[0].abs() <= 1.0, "stages {stages}, h {h}: {}", y[0]);
            }
        }
    }

    fn ball_system(a_n: f64) -> TimeFreezingSystem<PointMass2D> {
        build(
            CLSModel::new(PointMass2D { g: G }),
            a_n,
            BuildOptions::default(),
        )
        .unwrap()
    }

    fn ball_friction_system(mu: f64, a_n: f64) -> TimeFreezingSystem<PointMass2D> {
        build(
            CLSModel::new(PointMass2D { g: G }).with_friction(mu, 1),
            a_n,
            BuildOptions::default(),
        )
        .unwrap()
    }

    struct BallisticControl;
    impl Control for BallisticControl {
        fn eval(&self, _t: f64) -> Vec<f64> {
            vec![0.0, 0.0]
        }
    }

    /// Piecewise control of the persistent-sliding regression scenario:
    /// constant horizontal push, vertical force ramping up after t = 1.
    pub(crate) struct RampControl;
    impl Control for RampControl {
        fn eval(&self, t: f64) -> Vec<f64> {
            if t < 1.0 {
                vec![7.0, 0.0]
            } else {
                vec![7.0, 2.0 * G * (t - 1.0)]
            }
        }
        fn breakpoints(&self) -> Vec<f64> {
            vec![1.0]
        }
    }

    #[test]
    fn free_flight_keeps_clock_identity() {
        let sys = ball_system(G);
        let traj = simulate_event_driven(
            &sys,
            &[0.0, 10.0, 1.0, 2.0, 0.0],
            &BallisticControl,
            1.0,
            &SimOptions::default(),
        )
        .unwrap();
        assert_eq!(traj.segments.len(), 1);
        assert_eq!(traj.segments[0].mode, ModeLabel::Unconstrained);
        assert!(traj.events.is_empty());
        let yf = traj.terminal_y();
        assert!((yf[4] - 1.0).abs() < 1e-12);
        assert!((yf[1] - (10.0 + 2.0 - 0.5 * G)).abs() < 1e-9);
    }

    #[test]
    fn bouncing_drop_event_sequence() {
        let sys = ball_system(G);
        let traj = simulate_event_driven(
            &sys,
            &[0.0, 1.0, 0.0, 0.0, 0.0],
            &RampControl,
            3.5,
            &SimOptions::default(),
        )
        .unwrap();
        let kinds: Vec<EventKind> = traj.events.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![EventKind::Touchdown, EventKind::JumpComplete, EventKind::Liftoff]
        );
        // Touchdown when the drop from height 1 reaches the ground.
        let tau_td = traj.events[0].tau;
        assert!((tau_td - (2.0 / G).sqrt()).abs() < 1e-8);
        // Jump duration equals the analytic value: |v_pre| / (D a_n).
        let tau_jc = traj.events[1].tau;
        assert!((tau_jc - 2.0 * tau_td).abs() < 1e-7);
        // Normal velocity is zero at jump completion.
        let idx = traj.tau_grid.iter().position(|&t| t == tau_jc).unwrap();
        assert!(traj.y_samples[idx][3].abs() < 1e-8);
        // Liftoff at physical time 1.5, numerical time near 2.75.
        let tau_lo = traj.events[2].tau;
        assert!((2.7..=2.9).contains(&tau_lo), "liftoff at tau {tau_lo}");
        let ylo = &traj.y_samples[traj.tau_grid.iter().position(|&t| t == tau_lo).unwrap()];
        assert!((ylo[4] - 1.5).abs() < 1e-6, "liftoff clock {}", ylo[4]);
    }

    #[test]
    fn sliding_clock_rate_is_half() {
        let sys = ball_system(G);
        let traj = simulate_event_driven(
            &sys,
            &[0.0, 1.0, 0.0, 0.0, 0.0],
            &RampControl,
            3.5,
            &SimOptions::default(),
        )
        .unwrap();
        // Between jump completion and tau = 2 the clock rate is gamma = 0.5.
        let seg = traj
            .segments
            .iter()
            .find(|s| s.mode == ModeLabel::Sliding)
            .unwrap();
        for i in seg.start_index..seg.end_index {
            let tau0 = traj.tau_grid[i];
            let tau1 = traj.tau_grid[i + 1];
            if tau1 <= 2.0 - 1e-9 && tau1 > tau0 {
                let rate = (traj.y_samples[i + 1][4] - traj.y_samples[i][4]) / (tau1 - tau0);
                assert!((rate - 0.5).abs() < 1e-6, "clock rate {rate} at tau {tau0}");
            }
        }
        // Filippov weights on the sliding segment stay a convex combination.
        for i in seg.start_index..=seg.end_index {
            let th = &traj.theta_samples[i];
            assert!(th.iter().all(|&t| t >= -1e-12));
            assert!((th.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frictional_drop_impulse_ratio() {
        let sys = ball_friction_system(0.6, 100.0);
        let traj = simulate_event_driven(
            &sys,
            &[0.0, 1.0, 3.0, 0.0, 0.0],
            &BallisticControl,
            2.0,
            &SimOptions::default(),
        )
        .unwrap();
        let td = traj.events.iter().position(|e| e.kind == EventKind::Touchdown).unwrap();
        let jc = traj.events.iter().position(|e| e.kind == EventKind::JumpComplete).unwrap();
        let i0 = traj.tau_grid.iter().position(|&t| t == traj.events[td].tau).unwrap();
        let i1 = traj.tau_grid.iter().position(|&t| t == traj.events[jc].tau).unwrap();
        let (v_pre, v_post) = (&traj.y_samples[i0][2..4], &traj.y_samples[i1][2..4]);
        let dv1 = v_post[0] - v_pre[0];
        let dv2 = v_post[1] - v_pre[1];
        assert!(dv1 < 0.0, "friction opposes forward slip");
        assert!((dv1.abs() - 0.6 * dv2.abs()).abs() < 1e-8, "|{dv1}| vs 0.6 |{dv2}|");
        // Energy dissipated by the inelastic impact.
        let m = &sys.model;
        let e_pre = m.kinetic_energy(&traj.y_samples[i0][..2], v_pre);
        let e_post = m.kinetic_energy(&traj.y_samples[i1][..2], v_post);
        assert!(e_post < e_pre);
    }

    #[test]
    fn clock_monotone_and_frozen_on_aux() {
        let sys = ball_friction_system(0.6, 100.0);
        let traj = simulate_event_driven(
            &sys,
            &[0.0, 1.0, 3.0, 0.0, 0.0],
            &BallisticControl,
            2.0,
            &SimOptions::default(),
        )
        .unwrap();
        for i in 1..traj.tau_grid.len() {
            assert!(traj.y_samples[i][4] >= traj.y_samples[i - 1][4] - 1e-12);
        }
        for seg in &traj.segments {
            if matches!(
                seg.mode,
                ModeLabel::Aux | ModeLabel::AuxTangPlus | ModeLabel::AuxTangMinus
            ) {
                let t0 = traj.y_samples[seg.start_index][4];
                for i in seg.start_index..=seg.end_index {
                    assert!((traj.y_samples[i][4] - t0).abs() < 1e-14);
                    // Configuration frozen too.
                    assert_eq!(traj.y_samples[i][..2], traj.y_samples[seg.start_index][..2]);
                }
            }
        }
    }

    #[test]
    fn dcs_matches_smooth_flow() {
        let sys = Arc::new(ball_system(G));
        let dcs = build_dcs(sys.clone());
        let y0 = [0.0, 10.0, 1.0, 2.0, 0.0];
        let traj = simulate_dcs(
            &dcs,
            &y0,
            &BallisticControl,
            1.0,
            &DcsOptions {
                n_steps: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let yf = traj.terminal_y();
        assert!((yf[1] - (10.0 + 2.0 - 0.5 * G)).abs() < 1e-8, "{}", yf[1]);
        assert!((yf[4] - 1.0).abs() < 1e-8);
        assert!(traj.comp_residual <= 1e-8);
    }

    #[test]
    fn dcs_aligned_element_hits_switch() {
        let sys = Arc::new(ball_system(G));
        let dcs = build_dcs(sys.clone());
        let tab = radau_iia(3);
        // Drop that crosses the ground inside one element.
        let y0 = [0.0, 0.05, 0.0, -1.0, 0.0];
        let opts = DcsOptions::default();
        let sol = solve_element(
            &dcs,
            &tab,
            &y0,
            &BallisticControl,
            0.2,
            &opts,
            Some(AlignTarget::Switch(0)),
            None,
        )
        .unwrap();
        let n_st = sys.n_y + dcs.n_z();
        let y_end = &sol.w[2 * n_st..2 * n_st + sys.n_y];
        assert!(y_end[1].abs() <= 1e-9, "gap at aligned end: {}", y_end[1]);
        assert!(sol.h < 0.2);
    }

    #[test]
    fn dcs_drop_matches_event_driven() {
        let sys = Arc::new(ball_system(G));
        let dcs = build_dcs(sys.clone());
        let y0 = [0.0, 0.3, 1.0, 0.0, 0.0];
        let tau_f = 1.2;
        let ev = simulate_event_driven(&sys, &y0, &BallisticControl, tau_f, &SimOptions::default())
            .unwrap();
        let dc = simulate_dcs(
            &dcs,
            &y0,
            &BallisticControl,
            tau_f,
            &DcsOptions {
                n_steps: 40,
                ..Default::default()
            },
        )
        .unwrap();
        let ye = ev.terminal_y();
        let yd = dc.terminal_y();
        let err = ye
            .iter()
            .zip(yd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-4, "terminal mismatch {err}; ev {ye:?} dcs {yd:?}");
    }
}
