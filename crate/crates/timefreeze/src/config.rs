//! TOML configuration format for the CLI: model, reformulation,
//! simulation, and optimal-control sections. Unknown keys are rejected;
//! parse errors carry positions (from the TOML parser for structure, from
//! the expression parser for formulas).

use std::collections::HashMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::diffkit::Scalar;
use crate::error::{Error, Result};
use crate::expr::{BindCtx, BoundExpr, Expr, ExprModel};
use crate::model::CLSModel;
use crate::ocp::{OCPDefinition, OcpConstraints, OcpCost, RkOpts};
use crate::reform::{build, BuildOptions, TimeFreezingSystem};
use crate::sim::{Control, DcsOptions, SimOptions};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub model: ModelSection,
    pub reform: ReformSection,
    pub sim: Option<SimSection>,
    pub ocp: Option<OcpSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_q: usize,
    pub n_u: usize,
    /// Velocity dynamics M(q) v' = f_v(q, v, u); one expression per row.
    pub f_v: Vec<String>,
    /// Row-major n_q x n_q inertia entries.
    pub mass: Vec<String>,
    /// Gap function; contact is active at zero.
    pub gap: String,
    /// Tangent basis rows at the contact (empty when frictionless).
    #[serde(default)]
    pub tangents: Vec<Vec<String>>,
    /// Coulomb friction coefficient; absent means frictionless.
    pub mu: Option<f64>,
    /// Named constants usable in every expression.
    #[serde(default)]
    pub params: HashMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReformSection {
    /// Normal auxiliary-dynamics rate.
    pub a_n: f64,
    /// Tangential auxiliary rate; defaults to mu * a_n.
    pub a_t: Option<f64>,
    /// Reserved tangential smoothing knob; accepted for forward
    /// compatibility, not consumed by the current reformulation.
    pub eps_t: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Numerical-time horizon.
    pub tau_f: f64,
    /// Initial mechanical state (q, v), clock starting at zero.
    pub x0: Vec<f64>,
    /// "event" (default) or "dcs".
    pub integrator: Option<String>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    /// Step count for the fixed-grid collocation integrator.
    pub n_steps: Option<usize>,
    pub sigma0: Option<f64>,
    pub sigma_min: Option<f64>,
    /// Piecewise control signal; empty means zero control.
    #[serde(default)]
    pub control: Vec<ControlPiece>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPiece {
    /// Physical time up to which this piece applies; the last piece may
    /// omit it to extend to the horizon.
    pub until: Option<f64>,
    /// One expression per control component, over `t` and parameters.
    pub u: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    /// Physical horizon T.
    pub t: f64,
    /// Numerical horizon; defaults to T.
    pub t_num: Option<f64>,
    /// Number of control intervals.
    pub n: usize,
    pub x0: Vec<f64>,
    /// Running cost over q, v, u.
    pub stage_cost: String,
    /// Terminal cost over q, v.
    pub terminal_cost: Option<String>,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    /// Upper bound on the speed-of-time variable.
    pub s_max: f64,
    /// Terminal equality targets; absent components are free.
    pub q_target: Option<Vec<f64>>,
    pub v_target: Option<Vec<f64>>,
    pub n_stages: Option<usize>,
    pub n_elements: Option<usize>,
    pub sigma0: Option<f64>,
    pub sigma_min: Option<f64>,
    pub max_iter: Option<usize>,
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<ConfigDocument> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<ConfigDocument> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Build the expression-defined contact model.
    pub fn model(&self) -> Result<CLSModel<ExprModel>> {
        let m = &self.model;
        let dyn_ = ExprModel::new(
            m.n_q, m.n_u, &m.f_v, &m.mass, &m.gap, &m.tangents, &m.params,
        )?;
        let mut model = CLSModel::new(dyn_);
        if let Some(mu) = m.mu {
            if m.tangents.is_empty() {
                return Err(Error::Config(
                    "friction requires at least one tangent row".into(),
                ));
            }
            if !(mu > 0.0) {
                return Err(Error::Config(format!("mu must be positive, got {mu}")));
            }
            model = model.with_friction(mu, m.tangents.len());
        }
        Ok(model)
    }

    /// Build the clock-augmented system from [model] and [reform].
    pub fn system(&self) -> Result<Arc<TimeFreezingSystem<ExprModel>>> {
        let model = self.model()?;
        if !(self.reform.a_n > 0.0) {
            return Err(Error::Config(format!(
                "a_n must be positive, got {}",
                self.reform.a_n
            )));
        }
        let opts = BuildOptions { a_t: self.reform.a_t, ..BuildOptions::default() };
        Ok(Arc::new(build(model, self.reform.a_n, opts)?))
    }

    fn sim_section(&self) -> Result<&SimSection> {
        self.sim
            .as_ref()
            .ok_or_else(|| Error::Config("missing [sim] section".into()))
    }

    /// Initial clock-augmented state for simulation: (q, v, t=0).
    pub fn sim_y0(&self) -> Result<Vec<f64>> {
        let sim = self.sim_section()?;
        let n_x = 2 * self.model.n_q;
        if sim.x0.len() != n_x {
            return Err(Error::Config(format!(
                "sim.x0 must have {n_x} entries (q then v), found {}",
                sim.x0.len()
            )));
        }
        let mut y0 = sim.x0.clone();
        y0.push(0.0);
        Ok(y0)
    }

    /// Piecewise-expression control signal from [sim].
    pub fn sim_control(&self) -> Result<PiecewiseControl> {
        let sim = self.sim_section()?;
        PiecewiseControl::new(&sim.control, self.model.n_u, &self.model.params)
    }

    pub fn sim_options(&self) -> Result<SimOptions> {
        let sim = self.sim_section()?;
        let mut o = SimOptions::default();
        if let Some(r) = sim.rtol {
            o.rtol = r;
        }
        if let Some(a) = sim.atol {
            o.atol = a;
        }
        Ok(o)
    }

    pub fn dcs_options(&self) -> Result<DcsOptions> {
        let sim = self.sim_section()?;
        let mut o = DcsOptions::default();
        if let Some(n) = sim.n_steps {
            o.n_steps = n;
        }
        if let Some(s) = sim.sigma0 {
            o.sigma0 = s;
        }
        if let Some(s) = sim.sigma_min {
            o.sigma_min = s;
        }
        Ok(o)
    }

    /// Assemble the optimal-control problem from [ocp].
    pub fn ocp_definition(
        &self,
    ) -> Result<OCPDefinition<ExprModel, ExprCost, TargetConstraints>> {
        let sys = self.system()?;
        let o = self
            .ocp
            .as_ref()
            .ok_or_else(|| Error::Config("missing [ocp] section".into()))?;
        let n_q = self.model.n_q;
        let n_u = self.model.n_u;
        let n_x = 2 * n_q;
        if o.x0.len() != n_x {
            return Err(Error::Config(format!(
                "ocp.x0 must have {n_x} entries (q then v), found {}",
                o.x0.len()
            )));
        }
        if o.u_lb.len() != n_u || o.u_ub.len() != n_u {
            return Err(Error::Config(format!(
                "ocp.u_lb / ocp.u_ub must have {n_u} entries"
            )));
        }
        if o.n == 0 {
            return Err(Error::Config("ocp.n must be at least 1".into()));
        }
        let ctx = BindCtx { n_q, n_u, allow_t: false, params: &self.model.params };
        let stage = Expr::parse(&o.stage_cost)?.bind(&ctx)?;
        let terminal = o
            .terminal_cost
            .as_deref()
            .map(|s| Expr::parse(s)?.bind(&ctx))
            .transpose()?;
        for (name, tgt) in [("q_target", &o.q_target), ("v_target", &o.v_target)] {
            if let Some(t) = tgt {
                if t.len() != n_q {
                    return Err(Error::Config(format!(
                        "ocp.{name} must have {n_q} entries, found {}",
                        t.len()
                    )));
                }
            }
        }
        Ok(OCPDefinition {
            sys,
            t_phys: o.t,
            t_num: o.t_num.unwrap_or(o.t),
            n_ctrl: o.n,
            cost: ExprCost { n_q, stage, terminal },
            cons: TargetConstraints {
                n_q,
                q_target: o.q_target.clone(),
                v_target: o.v_target.clone(),
            },
            x0: o.x0.clone(),
            u_lb: o.u_lb.clone(),
            u_ub: o.u_ub.clone(),
            s_max: o.s_max,
        })
    }

    pub fn rk_opts(&self) -> RkOpts {
        let mut rk = RkOpts::default();
        if let Some(o) = &self.ocp {
            if let Some(s) = o.n_stages {
                rk.n_stages = s;
            }
            if let Some(e) = o.n_elements {
                rk.n_elements = e;
            }
        }
        rk
    }

    pub fn homotopy_opts(&self) -> crate::ocp::HomotopyOpts {
        let mut h = crate::ocp::HomotopyOpts::default();
        if let Some(o) = &self.ocp {
            if let Some(s) = o.sigma0 {
                h.sigma0 = s;
            }
            if let Some(s) = o.sigma_min {
                h.sigma_min = s;
            }
        }
        h
    }

    pub fn nlp_opts(&self) -> crate::nlp::NLPOptions {
        let mut n = crate::nlp::NLPOptions::default();
        if let Some(o) = &self.ocp {
            if let Some(m) = o.max_iter {
                n.max_iter = m;
            }
        }
        n
    }
}

// ---------------------------------------------------------------------------
// Expression-backed control signal and OCP callbacks

/// Piecewise control: each piece evaluates expressions of physical time,
/// and the piece boundaries are reported as breakpoints so integrators
/// can align steps with them.
pub struct PiecewiseControl {
    /// (end time, component expressions); the last end may be infinite.
    pieces: Vec<(f64, Vec<BoundExpr>)>,
    n_u: usize,
}

impl PiecewiseControl {
    pub fn new(
        pieces: &[ControlPiece],
        n_u: usize,
        params: &HashMap<String, f64>,
    ) -> Result<PiecewiseControl> {
        let ctx = BindCtx { n_q: 0, n_u: 0, allow_t: true, params };
        let mut out = Vec::new();
        let mut prev_end = 0.0f64;
        for (i, p) in pieces.iter().enumerate() {
            if p.u.len() != n_u {
                return Err(Error::Config(format!(
                    "control piece {} must have {n_u} expressions, found {}",
                    i + 1,
                    p.u.len()
                )));
            }
            let end = match p.until {
                Some(t) => {
                    if t <= prev_end {
                        return Err(Error::Config(format!(
                            "control piece {} ends at {t} which is not after {prev_end}",
                            i + 1
                        )));
                    }
                    t
                }
                None => {
                    if i + 1 != pieces.len() {
                        return Err(Error::Config(
                            "only the last control piece may omit `until`".into(),
                        ));
                    }
                    f64::INFINITY
                }
            };
            prev_end = end;
            let exprs = p
                .u
                .iter()
                .map(|s| Expr::parse(s)?.bind(&ctx))
                .collect::<Result<Vec<_>>>()?;
            out.push((end, exprs));
        }
        Ok(PiecewiseControl { pieces: out, n_u })
    }
}

impl Control for PiecewiseControl {
    fn eval(&self, t: f64) -> Vec<f64> {
        for (end, exprs) in &self.pieces {
            if t < *end {
                return exprs.iter().map(|e| e.eval(&[], &[], &[], &t)).collect();
            }
        }
        match self.pieces.last() {
            Some((_, exprs)) => exprs.iter().map(|e| e.eval(&[], &[], &[], &t)).collect(),
            None => vec![0.0; self.n_u],
        }
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.pieces
            .iter()
            .map(|(end, _)| *end)
            .filter(|e| e.is_finite())
            .collect()
    }
}

/// Stage and terminal cost given by expressions over (q, v, u).
pub struct ExprCost {
    n_q: usize,
    stage: BoundExpr,
    terminal: Option<BoundExpr>,
}

impl OcpCost for ExprCost {
    fn stage<S: Scalar>(&self, x: &[S], u: &[S]) -> S {
        let (q, v) = x.split_at(self.n_q);
        self.stage.eval(q, v, u, &S::zero())
    }
    fn terminal<S: Scalar>(&self, x: &[S]) -> S {
        match &self.terminal {
            Some(e) => {
                let (q, v) = x.split_at(self.n_q);
                e.eval(q, v, &[], &S::zero())
            }
            None => S::zero(),
        }
    }
}

/// Terminal equality constraints pinning q and/or v to target values.
pub struct TargetConstraints {
    n_q: usize,
    q_target: Option<Vec<f64>>,
    v_target: Option<Vec<f64>>,
}

impl OcpConstraints for TargetConstraints {
    fn terminal_eq<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut rows = Vec::new();
        if let Some(qt) = &self.q_target {
            for (i, &ti) in qt.iter().enumerate() {
                rows.push(x[i].clone() - S::constant(ti));
            }
        }
        if let Some(vt) = &self.v_target {
            for (i, &ti) in vt.iter().enumerate() {
                rows.push(x[self.n_q + i].clone() - S::constant(ti));
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const POINT_MASS: &str = r#"
        [model]
        n_q = 2
        n_u = 2
        f_v = ["u1", "u2 - g"]
        mass = ["1", "0", "0", "1"]
        gap = "q2"
        tangents = [["1", "0"]]
        [model.params]
        g = 9.81

        [reform]
        a_n = 9.81

        [sim]
        tau_f = 1.0
        x0 = [0.0, 1.0, 0.5, 0.0]
        [[sim.control]]
        until = 0.5
        u = ["2 * t", "0"]
        [[sim.control]]
        u = ["1", "0"]
    "#;

    #[test]
    fn parses_and_builds_system() {
        let cfg = ConfigDocument::parse(POINT_MASS).unwrap();
        let sys = cfg.system().unwrap();
        assert_eq!(sys.n_f, 2, "frictionless system has two Filippov modes");
        assert_eq!(sys.n_y, 5);
        let y0 = cfg.sim_y0().unwrap();
        assert_eq!(y0, vec![0.0, 1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn control_pieces_and_breakpoints() {
        let cfg = ConfigDocument::parse(POINT_MASS).unwrap();
        let ctrl = cfg.sim_control().unwrap();
        assert_eq!(ctrl.eval(0.25), vec![0.5, 0.0]);
        assert_eq!(ctrl.eval(0.75), vec![1.0, 0.0]);
        assert_eq!(ctrl.breakpoints(), vec![0.5]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = POINT_MASS.replace("tau_f = 1.0", "tau_f = 1.0\nbogus_key = 3");
        let err = ConfigDocument::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn toml_errors_carry_line_numbers() {
        let err = ConfigDocument::parse("[model\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn ocp_section_roundtrip() {
        let text = format!(
            "{POINT_MASS}\n{}",
            r#"
            [ocp]
            t = 2.0
            n = 20
            x0 = [0.0, 0.5, 0.0, 0.0]
            stage_cost = "u1^2"
            u_lb = [-10.0, 0.0]
            u_ub = [10.0, 0.0]
            s_max = 20.0
            q_target = [3.0, 0.0]
            v_target = [0.0, 0.0]
            "#
        );
        let cfg = ConfigDocument::parse(&text).unwrap();
        let ocp = cfg.ocp_definition().unwrap();
        assert_eq!(ocp.n_ctrl, 20);
        assert_eq!(ocp.t_num, 2.0);
        let x = [3.0f64, 0.0, 0.0, 0.0];
        assert!(ocp.cons.terminal_eq(&x).iter().all(|r| r.abs() < 1e-15));
        let u = [2.0f64, 0.0];
        assert_eq!(ocp.cost.stage(&x, &u), 4.0);
    }

    #[test]
    fn misdimensioned_sections_rejected() {
        let bad = POINT_MASS.replace("x0 = [0.0, 1.0, 0.5, 0.0]", "x0 = [0.0, 1.0]");
        let cfg = ConfigDocument::parse(&bad).unwrap();
        assert!(cfg.sim_y0().is_err());
        let bad = POINT_MASS.replace("mass = [\"1\", \"0\", \"0\", \"1\"]", "mass = [\"1\"]");
        let cfg = ConfigDocument::parse(&bad).unwrap();
        assert!(cfg.model().is_err());
    }
}
