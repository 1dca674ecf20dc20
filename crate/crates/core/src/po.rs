//! Predict-then-optimize tasks on top of a [`PowerFlowModel`].
//!
//! Every task minimises a function of the predicted residual
//! `ρ̂(u) = ρ(Φ(u), u)`:
//!
//! * [`solve_po_pf`] — find the slack generation that makes an operating
//!   condition consistent;
//! * [`solve_po_qss`] — find the steady-state frequency under droop control;
//! * [`solve_po_opf`] — minimise a quadratic generation cost plus `λ ρ̂` and
//!   exterior penalties on operational limits.
//!
//! [`ExactModel`] wraps the residual solver behind the same interface, so any
//! task can be run in "oracle mode" to produce ground truth.
//! [`grid_search_oracle`] evaluates the OPF objective exhaustively on a 1-D
//! or 2-D grid of decision values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::csvio::Table;
use crate::error::{Error, Result};
use crate::injectors::{branch_partials, branch_terminal_currents};
use crate::network::Network;
use crate::neural_solver::{predict_residual_and_grad, PowerFlowModel};
use crate::residual::{assemble_residual, full_control_jacobian, residual_jacobian, rho, SlackSpec, Wrt};
use crate::rpf_solver::{solve_rpf, RpfSolution, SolverConfig};
use crate::state::{ControlVector, VoltageState};

/// Split of the control vector into decision and fixed entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPartition {
    pub decisions: Vec<usize>,
    pub fixed: Vec<usize>,
}

impl ControlPartition {
    pub fn new(decisions: Vec<usize>, n_controls: usize) -> Result<Self> {
        let mut seen = vec![false; n_controls];
        for &k in &decisions {
            if k >= n_controls || seen[k] {
                return Err(Error::Validation(format!(
                    "decision index {k} is out of range or repeated (controls: {n_controls})"
                )));
            }
            seen[k] = true;
        }
        let fixed = (0..n_controls).filter(|&k| !seen[k]).collect();
        Ok(Self { decisions, fixed })
    }
}

/// Proportional speed-droop response of every generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopConfig {
    pub p_rated: Vec<f64>,
    pub r: f64,
    pub omega0: f64,
}

impl DroopConfig {
    /// Rated power taken from each generator's `p_max`, droop `R = 0.04`.
    pub fn from_network(network: &Network) -> Self {
        Self {
            p_rated: network.generators.iter().map(|g| g.p_max).collect(),
            r: 0.04,
            omega0: 1.0,
        }
    }

    pub fn validate(&self, n_gens: usize) -> Result<()> {
        if self.p_rated.len() != n_gens {
            return Err(Error::Validation(format!(
                "droop needs {n_gens} rated powers, got {}",
                self.p_rated.len()
            )));
        }
        if !(self.r > 0.0) || !(self.omega0 > 0.0) || self.p_rated.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Validation("droop R, ω0 and rated powers must be positive".into()));
        }
        Ok(())
    }

    /// `ΔP_{M,k} = −(1/R)·((ω − ω0)/ω0)·P_rated,k`.
    pub fn delta_pm(&self, omega: f64) -> Vec<f64> {
        let rel = (omega - self.omega0) / self.omega0;
        self.p_rated.iter().map(|p| -rel * p / self.r).collect()
    }

    /// Control-space direction per unit of `ω − ω0`.
    pub fn direction(&self, network: &Network) -> Result<Vec<f64>> {
        self.validate(network.generators.len())?;
        let mut d = vec![0.0; network.n_controls()];
        for (j, p) in self.p_rated.iter().enumerate() {
            d[network.layout().gen_pm(j)] = -p / (self.r * self.omega0);
        }
        Ok(d)
    }

    /// The droop response as a distributed slack: factors proportional to
    /// the rated powers.
    pub fn slack_spec(&self) -> Result<SlackSpec> {
        let total: f64 = self.p_rated.iter().sum();
        SlackSpec::distributed(self.p_rated.iter().enumerate().map(|(j, p)| (j, p / total)).collect())
    }

    /// Frequency at which the droop response equals slack value `s` of
    /// [`Self::slack_spec`].
    pub fn omega_from_slack(&self, s: f64) -> f64 {
        let total: f64 = self.p_rated.iter().sum();
        self.omega0 - s * self.r * self.omega0 / total
    }
}

/// Quadratic-cost OPF with operational limits, evaluated on the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSpec {
    /// Symmetric PSD matrix over the full control vector.
    pub q_matrix: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    /// Initial weight on `ρ̂`.
    pub lambda: f64,
    /// Final weight on `ρ̂`; set above `lambda` to enable continuation.
    pub lambda_max: f64,
    /// Initial exterior-penalty weight.
    pub penalty: f64,
    /// Final exterior-penalty weight.
    pub penalty_max: f64,
    /// Factor by which both weights grow between continuation stages.
    pub growth: f64,
    /// Box bounds per control entry.
    pub u_bounds: Vec<(f64, f64)>,
    /// Voltage-magnitude bounds per bus.
    pub v_bounds: Option<Vec<(f64, f64)>>,
    /// Limit on `|φ|` for every branch.
    pub angle_limit: Option<f64>,
    /// Enforce branch current ratings where the network has them.
    pub current_limits: bool,
}

impl OpfSpec {
    /// Generator cost polynomials as a quadratic form over `P_M` entries,
    /// in units of `cost_scale` $/h, with the network's bus voltage limits,
    /// generator limits and current ratings. `λ` is fixed at 1e3; the
    /// penalty weight grows from 1e3 to 1e6.
    pub fn generation_cost(network: &Network, cost_scale: f64) -> Self {
        let m = network.n_controls();
        let layout = network.layout();
        let base = network.base_mva;
        let mut q_matrix = DMatrix::zeros(m, m);
        let mut q_vec = DVector::zeros(m);
        let mut u_bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); m];
        for (j, g) in network.generators.iter().enumerate() {
            let k = layout.gen_pm(j);
            u_bounds[k] = (g.p_min, g.p_max);
            if let Some(c) = &g.cost {
                let n = c.len();
                if n >= 3 {
                    q_matrix[(k, k)] = c[n - 3] * base * base * cost_scale;
                }
                if n >= 2 {
                    q_vec[k] = c[n - 2] * base * cost_scale;
                }
            }
        }
        Self {
            q_matrix,
            q_vec,
            lambda: 1e3,
            lambda_max: 1e3,
            penalty: 1e3,
            penalty_max: 1e6,
            growth: 10.0,
            u_bounds,
            v_bounds: Some(network.buses.iter().map(|b| (b.vmin, b.vmax)).collect()),
            angle_limit: None,
            current_limits: true,
        }
    }

    pub fn validate(&self, n_controls: usize, n_buses: usize) -> Result<()> {
        if self.q_matrix.shape() != (n_controls, n_controls)
            || self.q_vec.len() != n_controls
            || self.u_bounds.len() != n_controls
        {
            return Err(Error::Validation("OPF cost and bounds must match the control vector".into()));
        }
        if self.v_bounds.as_ref().is_some_and(|b| b.len() != n_buses) {
            return Err(Error::Validation("OPF voltage bounds must cover every bus".into()));
        }
        if !(self.lambda > 0.0)
            || !(self.lambda_max >= self.lambda)
            || !(self.penalty >= 0.0)
            || !(self.penalty_max >= self.penalty)
            || !(self.growth > 1.0)
        {
            return Err(Error::Validation(
                "OPF needs 0 < λ ≤ λ_max, 0 ≤ penalty ≤ penalty_max, growth > 1".into(),
            ));
        }
        let asym = (&self.q_matrix - self.q_matrix.transpose()).amax();
        let scale = self.q_matrix.amax().max(1.0);
        if asym > 1e-12 * scale {
            return Err(Error::Validation("OPF cost matrix is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(self.q_matrix.clone()).eigenvalues.min();
        if min_eig < -1e-12 * scale {
            return Err(Error::Validation(format!("OPF cost matrix is not PSD (eigenvalue {min_eig:e})")));
        }
        Ok(())
    }

    pub fn cost(&self, u: &ControlVector) -> f64 {
        let x = DVector::from_column_slice(&u.entries);
        (x.transpose() * &self.q_matrix * &x)[0] + self.q_vec.dot(&x)
    }

    fn cost_gradient(&self, u: &ControlVector) -> DVector<f64> {
        let x = DVector::from_column_slice(&u.entries);
        2.0 * &self.q_matrix * x + &self.q_vec
    }

    /// `(λ, μ)` of each continuation stage; each weight grows until it
    /// reaches its cap.
    pub fn schedule(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(self.lambda, self.penalty)];
        loop {
            let (l, p) = *out.last().unwrap();
            let below = |w: f64, cap: f64| w * (1.0 + 1e-12) < cap;
            if !below(l, self.lambda_max) && !below(p, self.penalty_max) {
                return out;
            }
            out.push(((l * self.growth).min(self.lambda_max), (p * self.growth).min(self.penalty_max)));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    VoltageMax,
    VoltageMin,
    BranchAngle,
    CurrentFrom,
    CurrentTo,
}

/// A positive constraint excess `g > 0` at bus or branch `index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub index: usize,
    pub amount: f64,
}

/// A constraint value `g(v)` (satisfied when `g ≤ 0`) and `∂g/∂v`.
struct Constraint {
    kind: ConstraintKind,
    index: usize,
    value: f64,
    grad: Vec<(usize, f64)>,
}

fn constraints(network: &Network, spec: &OpfSpec, v: &VoltageState) -> Vec<Constraint> {
    let n = network.n_buses();
    let mut out = Vec::new();
    if let Some(bounds) = &spec.v_bounds {
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            let vm = v.magnitudes[k];
            out.push(Constraint {
                kind: ConstraintKind::VoltageMax,
                index: k,
                value: vm - hi,
                grad: vec![(k, 1.0)],
            });
            out.push(Constraint {
                kind: ConstraintKind::VoltageMin,
                index: k,
                value: lo - vm,
                grad: vec![(k, -1.0)],
            });
        }
    }
    if let Some(lim) = spec.angle_limit {
        for (l, &phi) in v.branch_angles.iter().enumerate() {
            out.push(Constraint {
                kind: ConstraintKind::BranchAngle,
                index: l,
                value: phi.abs() - lim,
                grad: vec![(n + l, if phi >= 0.0 { 1.0 } else { -1.0 })],
            });
        }
    }
    if spec.current_limits {
        for (l, br) in network.branches.iter().enumerate() {
            let Some(limit) = br.current_limit else { continue };
            let (vf, vt, phi) = (v.magnitudes[br.from], v.magnitudes[br.to], v.branch_angles[l]);
            let (i_f, i_t) = branch_terminal_currents(br, vf, vt, phi);
            let (p_f, p_t) = branch_partials(br, vf, vt, phi);
            for (kind, i, p) in [(ConstraintKind::CurrentFrom, i_f, p_f), (ConstraintKind::CurrentTo, i_t, p_t)] {
                let mag = i.norm();
                let d = |di: num_complex::Complex64| if mag > 0.0 { (i.conj() * di).re / mag } else { 0.0 };
                out.push(Constraint {
                    kind,
                    index: l,
                    value: mag - limit,
                    grad: vec![(br.from, d(p.d_vf)), (br.to, d(p.d_vt)), (n + l, d(p.d_phi))],
                });
            }
        }
    }
    out
}

/// Constraint excesses of `v` under `spec`, in evaluation order.
pub fn violations(network: &Network, spec: &OpfSpec, v: &VoltageState) -> Vec<Violation> {
    constraints(network, spec, v)
        .into_iter()
        .filter(|c| c.value > 0.0)
        .map(|c| Violation {
            kind: c.kind,
            index: c.index,
            amount: c.value,
        })
        .collect()
}

fn penalty_sum(network: &Network, spec: &OpfSpec, v: &VoltageState) -> f64 {
    violations(network, spec, v).iter().map(|x| x.amount * x.amount).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoResult {
    pub u_solution: ControlVector,
    pub v_hat: VoltageState,
    /// `ρ(v_hat, u_solution)`.
    pub rho_hat: f64,
    pub objective: f64,
    pub violations: Vec<Violation>,
    pub iterations: usize,
    pub method: String,
    /// The optimised scalar: slack value for PF, `ω*` for QSS.
    pub parameter: Option<f64>,
    /// Evaluated `(parameter, ρ̂)` pairs of the scalar tasks, in evaluation order.
    pub curve: Vec<(f64, f64)>,
}

/// Tolerances of the PO solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoConfig {
    pub max_iter: usize,
    /// Relative width at which a scalar bracket counts as converged.
    pub x_tol: f64,
    /// Absolute slope below which a scalar iterate is accepted outright.
    pub slope_tol: f64,
    /// First trial move of the scalar search, in pu of the largest control change.
    pub initial_step: f64,
    pub max_expansions: usize,
    /// Projected-gradient tolerance of the OPF stages, relative to the cost gradient.
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for PoConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            x_tol: 1e-13,
            slope_tol: 1e-18,
            initial_step: 0.05,
            max_expansions: 60,
            grad_tol: 1e-9,
            step_tol: 1e-13,
        }
    }
}

/// The residual solver as a [`PowerFlowModel`]: `v(u) = argmin_v ρ(v, u)`.
/// Its sensitivity is the Gauss–Newton implicit derivative
/// `−(J_vᵀJ_v)⁻¹ J_vᵀ J_u`, exact wherever `r = 0`. Combined with the envelope
/// property `J_vᵀ r = 0`, the gradient of `ρ̂` is exact everywhere.
#[derive(Debug, Clone)]
pub struct ExactModel<'a> {
    pub network: &'a Network,
    pub config: SolverConfig,
}

impl<'a> ExactModel<'a> {
    pub fn new(network: &'a Network) -> Self {
        Self {
            network,
            config: SolverConfig::default(),
        }
    }

    pub fn solve(&self, u: &ControlVector) -> Result<RpfSolution> {
        let sol = solve_rpf(self.network, u, &self.config)?;
        if !sol.converged {
            return Err(Error::NotConverged {
                iterations: sol.iterations,
                rho: sol.rho,
            });
        }
        Ok(sol)
    }
}

impl PowerFlowModel for ExactModel<'_> {
    fn predict_voltage(&self, u: &ControlVector) -> Result<VoltageState> {
        Ok(self.solve(u)?.v_star)
    }

    fn voltage_jacobian(&self, u: &ControlVector) -> Result<DMatrix<f64>> {
        let v = self.predict_voltage(u)?;
        let jv = residual_jacobian(self.network, &v, u, &Wrt::Voltage)?;
        let ju = full_control_jacobian(self.network, &v, u)?;
        let jtj = jv.transpose() * &jv;
        let rhs = -(jv.transpose() * ju);
        match jtj.clone().cholesky() {
            Some(ch) => Ok(ch.solve(&rhs)),
            None => jtj
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| Error::Validation(format!("voltage sensitivity: {e}"))),
        }
    }
}

/// One scalar-search evaluation `(t, ρ̂(t), dρ̂/dt)`.
#[derive(Debug, Clone, Copy)]
struct Sample {
    t: f64,
    f: f64,
    g: f64,
}

struct ScalarMinimum {
    best: Sample,
    iterations: usize,
    curve: Vec<(f64, f64)>,
}

/// Safeguarded Newton search for a minimiser of a smooth scalar function.
/// The curvature comes from secants of the exact derivative; steps outside
/// the current bracket fall back to bisection. The best point never gets
/// worse from one iteration to the next.
fn minimize_scalar(
    mut eval: impl FnMut(f64) -> Result<(f64, f64)>,
    t0: f64,
    step: f64,
    cfg: &PoConfig,
) -> Result<ScalarMinimum> {
    let mut curve = Vec::new();
    let mut sample = |t: f64, curve: &mut Vec<(f64, f64)>| -> Result<Sample> {
        let (f, g) = eval(t)?;
        curve.push((t, f));
        Ok(Sample { t, f, g })
    };
    let start = sample(t0, &mut curve)?;
    if start.g.abs() <= cfg.slope_tol {
        return Ok(ScalarMinimum {
            best: start,
            iterations: 0,
            curve,
        });
    }
    let dir = -start.g.signum();
    let along = |s: &Sample| s.g * dir;

    // expand until the minimiser is bracketed between `lo` (descending) and `hi`
    let mut lo = start;
    let mut h = step;
    let mut hi = None;
    let mut iterations = 0;
    for _ in 0..cfg.max_expansions {
        iterations += 1;
        let s = sample(lo.t + dir * h, &mut curve)?;
        if s.f > lo.f || along(&s) >= 0.0 {
            hi = Some(s);
            break;
        }
        lo = s;
        h *= 2.0;
    }
    let Some(mut hi) = hi else {
        let listing: Vec<String> = curve.iter().map(|(t, f)| format!("({t:.6e}, {f:.6e})")).collect();
        return Err(Error::NonDescent(format!(
            "predicted residual keeps decreasing; curve: {}",
            listing.join(", ")
        )));
    };

    let mut prev = hi;
    while iterations < cfg.max_iter {
        let width = (hi.t - lo.t).abs();
        if width <= cfg.x_tol * (1.0 + lo.t.abs()) || lo.g.abs() <= cfg.slope_tol {
            break;
        }
        iterations += 1;
        let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
        let newton = if lo.g != prev.g {
            lo.t - lo.g * (lo.t - prev.t) / (lo.g - prev.g)
        } else {
            f64::NAN
        };
        let t = if newton.is_finite() && newton > a && newton < b && newton != lo.t {
            newton
        } else {
            0.5 * (a + b)
        };
        let s = sample(t, &mut curve)?;
        if s.f > lo.f || along(&s) >= 0.0 {
            prev = hi;
            hi = s;
            // a sign change on the far side keeps `lo` as the Newton anchor
            if s.f <= lo.f && along(&s) >= 0.0 {
                prev = s;
            }
        } else {
            prev = lo;
            lo = s;
        }
        if s.g == 0.0 && s.f <= lo.f {
            lo = s;
            break;
        }
    }
    let width = (hi.t - lo.t).abs();
    if width > cfg.x_tol * (1.0 + lo.t.abs()) && lo.g.abs() > cfg.slope_tol {
        return Err(Error::NotConverged {
            iterations,
            rho: lo.f,
        });
    }
    let best = if hi.f < lo.f { hi } else { lo };
    Ok(ScalarMinimum { best, iterations, curve })
}

fn scalar_result<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    u: ControlVector,
    parameter: f64,
    min: ScalarMinimum,
    method: &str,
) -> Result<PoResult> {
    let v_hat = model.predict_voltage(&u)?;
    let rho_hat = rho(&assemble_residual(network, &v_hat, &u)?);
    Ok(PoResult {
        u_solution: u,
        v_hat,
        rho_hat,
        objective: rho_hat,
        violations: Vec::new(),
        iterations: min.iterations,
        method: method.into(),
        parameter: Some(parameter),
        curve: min.curve,
    })
}

/// Minimises `ρ̂(u0 + t·d)` over the scalar `t`.
fn line_po<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    u0: &ControlVector,
    d: &[f64],
    cfg: &PoConfig,
) -> Result<ScalarMinimum> {
    let indices: Vec<usize> = (0..d.len()).filter(|&k| d[k] != 0.0).collect();
    let dn: f64 = d.iter().fold(0.0, |m, x| m.max(x.abs()));
    if dn == 0.0 {
        return Err(Error::Validation("PO search direction is zero".into()));
    }
    let eval = |t: f64| -> Result<(f64, f64)> {
        let p = predict_residual_and_grad(model, network, &u0.shifted(d, t), &indices)?;
        let slope = indices.iter().zip(p.grad.iter()).map(|(&k, g)| g * d[k]).sum();
        Ok((p.rho, slope))
    };
    minimize_scalar(eval, 0.0, cfg.initial_step / dn, cfg)
}

/// Slack recovery: `min_s ρ̂(u0 + s·d)` where `d` spreads `s` over the slack
/// generators. `parameter` holds `û_s`.
pub fn solve_po_pf<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    u0: &ControlVector,
    slack: &SlackSpec,
    cfg: &PoConfig,
) -> Result<PoResult> {
    let d = slack.direction(network)?;
    let min = line_po(model, network, u0, &d, cfg)?;
    let s = min.best.t;
    scalar_result(model, network, u0.shifted(&d, s), s, min, "po-pf")
}

/// Quasi-steady state under droop: `min_ω ρ̂(π(u0, ω))`. `parameter` holds `ω*`.
pub fn solve_po_qss<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    u0: &ControlVector,
    droop: &DroopConfig,
    cfg: &PoConfig,
) -> Result<PoResult> {
    let d = droop.direction(network)?;
    let min = line_po(model, network, u0, &d, cfg)?;
    let dw = min.best.t;
    scalar_result(model, network, u0.shifted(&d, dw), droop.omega0 + dw, min, "po-qss")
}

/// Applies the droop policy: every generator's `P_M` moves by its droop response.
pub fn droop_policy(network: &Network, u0: &ControlVector, droop: &DroopConfig, omega: f64) -> Result<ControlVector> {
    let d = droop.direction(network)?;
    Ok(u0.shifted(&d, omega - droop.omega0))
}

struct OpfEval {
    value: f64,
    grad: DVector<f64>,
}

fn opf_objective<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    spec: &OpfSpec,
    decisions: &[usize],
    u: &ControlVector,
    (lambda, mu): (f64, f64),
) -> Result<OpfEval> {
    let pred = predict_residual_and_grad(model, network, u, decisions)?;
    let cg = spec.cost_gradient(u);
    let mut grad = DVector::from_iterator(decisions.len(), decisions.iter().map(|&k| cg[k])) + lambda * &pred.grad;
    let active: Vec<Constraint> = constraints(network, spec, &pred.v_hat)
        .into_iter()
        .filter(|c| c.value > 0.0)
        .collect();
    let mut pen = 0.0;
    if !active.is_empty() {
        let dv = model.voltage_jacobian(u)?;
        for c in &active {
            pen += c.value * c.value;
            for (i, &k) in decisions.iter().enumerate() {
                let dg: f64 = c.grad.iter().map(|&(var, w)| w * dv[(var, k)]).sum();
                grad[i] += 2.0 * mu * c.value * dg;
            }
        }
    }
    Ok(OpfEval {
        value: spec.cost(u) + lambda * pred.rho + mu * pen,
        grad,
    })
}

/// OPF objective `uᵀQu + qᵀu + λ ρ̂ + μ Σ max(0, g)²` and its gradient over
/// the decision entries, at the final continuation weights.
pub fn opf_objective_and_grad<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    spec: &OpfSpec,
    partition: &ControlPartition,
    u: &ControlVector,
) -> Result<(f64, DVector<f64>)> {
    let w = *spec.schedule().last().unwrap();
    let e = opf_objective(model, network, spec, &partition.decisions, u, w)?;
    Ok((e.value, e.grad))
}

fn project(x: &mut DVector<f64>, bounds: &[(f64, f64)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Projected quasi-Newton minimisation of the OPF objective over the
/// decision entries, with `λ` and `μ` raised geometrically between stages.
pub fn solve_po_opf<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    spec: &OpfSpec,
    partition: &ControlPartition,
    u0: &ControlVector,
    cfg: &PoConfig,
) -> Result<PoResult> {
    spec.validate(network.n_controls(), network.n_buses())?;
    if partition.decisions.len() + partition.fixed.len() != network.n_controls() || u0.len() != network.n_controls() {
        return Err(Error::Validation("control partition does not match the network".into()));
    }
    let dec = &partition.decisions;
    let bounds: Vec<(f64, f64)> = dec.iter().map(|&k| spec.u_bounds[k]).collect();
    for (&k, &(lo, hi)) in dec.iter().zip(&bounds) {
        if !(lo <= u0[k] && u0[k] <= hi) {
            return Err(Error::InfeasibleStart(format!(
                "control {k} = {} outside [{lo}, {hi}]",
                u0[k]
            )));
        }
    }
    let with = |x: &DVector<f64>| {
        let mut u = u0.clone();
        for (&k, xi) in dec.iter().zip(x.iter()) {
            u[k] = *xi;
        }
        u
    };
    let mut x = DVector::from_iterator(dec.len(), dec.iter().map(|&k| u0[k]));
    let n = dec.len();
    let mut iterations = 0;
    let mut objective = f64::NAN;

    for weights in spec.schedule() {
        let mut cur = opf_objective(model, network, spec, dec, &with(&x), weights)?;
        let mut h_inv: Option<DMatrix<f64>> = None;
        let mut stage_iter = 0;
        loop {
            let scale = cur.grad.amax().max(spec.cost_gradient(&with(&x)).amax()).max(1.0);
            let mut trial = &x - &cur.grad;
            project(&mut trial, &bounds);
            if (&x - &trial).amax() <= cfg.grad_tol * scale {
                break;
            }
            if stage_iter >= cfg.max_iter {
                return Err(Error::NotConverged {
                    iterations,
                    rho: cur.value,
                });
            }
            stage_iter += 1;
            iterations += 1;

            // free variables: those not pinned at a bound by the gradient
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let (lo, hi) = bounds[i];
                    !((x[i] <= lo && cur.grad[i] > 0.0) || (x[i] >= hi && cur.grad[i] < 0.0))
                })
                .collect();
            let mask = |v: DVector<f64>| DVector::from_iterator(n, (0..n).map(|i| if free[i] { v[i] } else { 0.0 }));
            let g_free = mask(cur.grad.clone());
            let first = h_inv.is_none();
            let h = h_inv.clone().unwrap_or_else(|| {
                DMatrix::identity(n, n) * (cfg.initial_step / g_free.amax().max(f64::MIN_POSITIVE))
            });
            let mut directions = vec![mask(-(&h * &g_free))];
            if !first {
                directions.push(-&g_free * (cfg.initial_step / g_free.amax().max(f64::MIN_POSITIVE)));
            }

            let mut accepted = None;
            'dirs: for d in directions {
                if d.dot(&cur.grad) >= 0.0 {
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..60 {
                    let mut xn = &x + alpha * &d;
                    project(&mut xn, &bounds);
                    let step = &xn - &x;
                    if step.amax() <= cfg.step_tol * (1.0 + x.amax()) {
                        break;
                    }
                    let e = opf_objective(model, network, spec, dec, &with(&xn), weights)?;
                    if e.value <= cur.value + 1e-4 * cur.grad.dot(&step) {
                        accepted = Some((xn, e));
                        break 'dirs;
                    }
                    alpha *= 0.5;
                }
            }
            let Some((xn, e)) = accepted else { break };
            let s = &xn - &x;
            let y = &e.grad - &cur.grad;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let h0 = h_inv.unwrap_or_else(|| DMatrix::identity(n, n) * (sy / y.dot(&y)));
                let rho_k = 1.0 / sy;
                let i = DMatrix::<f64>::identity(n, n);
                let left = &i - rho_k * &s * y.transpose();
                let right = &i - rho_k * &y * s.transpose();
                h_inv = Some(left * h0 * right + rho_k * &s * s.transpose());
            }
            x = xn;
            cur = e;
        }
        objective = cur.value;
    }

    let u = with(&x);
    let v_hat = model.predict_voltage(&u)?;
    let rho_hat = rho(&assemble_residual(network, &v_hat, &u)?);
    Ok(PoResult {
        violations: violations(network, spec, &v_hat),
        u_solution: u,
        v_hat,
        rho_hat,
        objective,
        iterations,
        method: "po-opf".into(),
        parameter: None,
        curve: Vec::new(),
    })
}

/// Decision values along each axis of the grid oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ranges: Vec<(f64, f64)>,
    pub resolution: usize,
}

impl GridSpec {
    pub fn axis(&self, dim: usize) -> Vec<f64> {
        let (lo, hi) = self.ranges[dim];
        let n = self.resolution;
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// Nearest grid cell of a decision value along `dim`.
    pub fn cell(&self, dim: usize, value: f64) -> usize {
        let (lo, hi) = self.ranges[dim];
        if self.resolution == 1 || hi == lo {
            return 0;
        }
        let pos = (value - lo) / (hi - lo) * (self.resolution - 1) as f64;
        pos.round().clamp(0.0, (self.resolution - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub cell: Vec<usize>,
    pub coords: Vec<f64>,
    pub cost: f64,
    /// `None` when the exact solve failed.
    pub rho_exact: Option<f64>,
    pub rho_hat: Option<f64>,
    pub max_violation: Option<f64>,
    /// Cost + `λ_max ρ` + final-stage penalty, with exact `ρ` and voltages.
    pub objective: Option<f64>,
    pub objective_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub decisions: Vec<usize>,
    pub grid: GridSpec,
    pub points: Vec<GridPoint>,
    pub argmin_exact: Option<usize>,
    pub argmin_predicted: Option<usize>,
}

fn argmin(values: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|b| b.0)
}

/// Evaluates the OPF objective on a 1-D or 2-D grid of decision values, with
/// `ρ` from exact solves and, when `model` is given, `ρ̂` from the prediction.
/// Points are independent and evaluated in parallel; the output order is the
/// row-major grid order.
pub fn grid_search_oracle(
    network: &Network,
    spec: &OpfSpec,
    partition: &ControlPartition,
    u0: &ControlVector,
    grid: &GridSpec,
    model: Option<&(dyn PowerFlowModel + Sync)>,
    solver: &SolverConfig,
) -> Result<GridTable> {
    let dim = partition.decisions.len();
    if !(1..=2).contains(&dim) || grid.ranges.len() != dim || grid.resolution == 0 {
        return Err(Error::Validation(
            "grid oracle needs 1 or 2 decisions, one range each and resolution ≥ 1".into(),
        ));
    }
    spec.validate(network.n_controls(), network.n_buses())?;
    let (lambda, mu) = *spec.schedule().last().unwrap();
    let axes: Vec<Vec<f64>> = (0..dim).map(|d| grid.axis(d)).collect();
    let cells: Vec<Vec<usize>> = if dim == 1 {
        (0..grid.resolution).map(|i| vec![i]).collect()
    } else {
        (0..grid.resolution)
            .flat_map(|i| (0..grid.resolution).map(move |j| vec![i, j]))
            .collect()
    };

    let points: Vec<GridPoint> = cells
        .into_par_iter()
        .map(|cell| {
            let coords: Vec<f64> = cell.iter().enumerate().map(|(d, &i)| axes[d][i]).collect();
            let mut u = u0.clone();
            for (&k, c) in partition.decisions.iter().zip(&coords) {
                u[k] = *c;
            }
            let cost = spec.cost(&u);
            let exact = solve_rpf(network, &u, solver).ok().filter(|s| s.converged);
            let rho_exact = exact.as_ref().map(|s| s.rho);
            let max_violation = exact.as_ref().map(|s| {
                constraints(network, spec, &s.v_star)
                    .iter()
                    .fold(0.0f64, |m, c| m.max(c.value))
            });
            let objective = exact
                .as_ref()
                .map(|s| cost + lambda * s.rho + mu * penalty_sum(network, spec, &s.v_star));
            let predicted = model.and_then(|m| {
                let v = m.predict_voltage(&u).ok()?;
                let r = rho(&assemble_residual(network, &v, &u).ok()?);
                Some((r, cost + lambda * r + mu * penalty_sum(network, spec, &v)))
            });
            GridPoint {
                cell,
                coords,
                cost,
                rho_exact,
                rho_hat: predicted.map(|p| p.0),
                max_violation,
                objective,
                objective_hat: predicted.map(|p| p.1),
            }
        })
        .collect();
    Ok(GridTable {
        argmin_exact: argmin(points.iter().map(|p| p.objective)),
        argmin_predicted: argmin(points.iter().map(|p| p.objective_hat)),
        decisions: partition.decisions.clone(),
        grid: grid.clone(),
        points,
    })
}

impl GridTable {
    /// Rows of the grid with missing values left empty and the argmin rows flagged.
    pub fn to_table(&self, labels: &[String], header: serde_json::Value) -> Table {
        let mut columns: Vec<String> = self.decisions.iter().map(|&k| labels[k].clone()).collect();
        columns.extend(
            ["cost", "rho_exact", "rho_hat", "max_violation", "objective", "objective_hat", "argmin"]
                .map(String::from),
        );
        let mut table = Table::new(header, columns);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.coords.iter().map(f64::to_string).collect();
            row.push(p.cost.to_string());
            row.extend([p.rho_exact, p.rho_hat, p.max_violation, p.objective, p.objective_hat].map(opt));
            let flag = match (self.argmin_exact == Some(i), self.argmin_predicted == Some(i)) {
                (true, true) => "exact+predicted",
                (true, false) => "exact",
                (false, true) => "predicted",
                (false, false) => "",
            };
            row.push(flag.into());
            table.push(row);
        }
        table
    }

    /// Median `|ρ̂ − ρ|` over points where both are available.
    pub fn median_rho_deviation(&self) -> f64 {
        let d: Vec<f64> = self
            .points
            .iter()
            .filter_map(|p| Some((p.rho_hat? - p.rho_exact?).abs()))
            .collect();
        crate::stats::median(&d)
    }
}

/// Header describing a PO run, for table provenance.
pub fn describe(method: &str, cfg: &PoConfig) -> serde_json::Value {
    json!({ "method": method, "config": cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GenerationBase, SamplingConfig, SamplingMode};
    use crate::network::case9;
    use crate::neural_solver::{FeatureKind, NeuralSolver, Normalizer, Regressor};
    use crate::rpf_solver::solve_feasible;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lossless_ocs(n: usize, seed: u64) -> Vec<ControlVector> {
        let mut cfg = SamplingConfig::new(SamplingMode::Infeasible, n, seed);
        cfg.generation_base = GenerationBase::Lossless;
        cfg.gen_scale_range = (1.0, 1.0);
        let (ds, _) = generate_dataset(&case9(), &cfg).unwrap();
        ds.records.into_iter().map(|r| r.u).collect()
    }

    /// Untrained MLP with random weights, in physical units around a flat profile.
    fn random_solver(seed: u64) -> NeuralSolver {
        let net = case9();
        let mut reg = Regressor::new(FeatureKind::Mlp, net.n_controls(), net.n_voltage_vars(), [6, 5], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..reg.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        reg.set_params(&p);
        let mut nrm = Normalizer::identity(net.n_controls(), net.n_voltage_vars());
        nrm.out_mean = VoltageState::flat(9, 9).to_flat();
        nrm.out_scale.iter_mut().for_each(|s| *s = 0.02);
        NeuralSolver {
            regressor: reg,
            normalizer: nrm,
            n_buses: 9,
        }
    }

    #[test]
    fn partition_and_droop_arithmetic() {
        let p = ControlPartition::new(vec![9, 3], 12).unwrap();
        assert_eq!(p.fixed.len(), 10);
        assert!(!p.fixed.contains(&3) && !p.fixed.contains(&9));
        assert!(ControlPartition::new(vec![3, 3], 12).is_err());
        assert!(ControlPartition::new(vec![12], 12).is_err());

        let droop = DroopConfig {
            p_rated: vec![1.0],
            r: 0.04,
            omega0: 1.0,
        };
        assert!((droop.delta_pm(1.004)[0] + 0.1).abs() < 1e-12);
        let bad = DroopConfig { r: 0.0, ..droop.clone() };
        assert!(bad.validate(1).is_err());
    }

    #[test]
    fn droop_direction_matches_slack_parametrisation() {
        let net = case9();
        let droop = DroopConfig::from_network(&net);
        let d = droop.direction(&net).unwrap();
        let f = droop.slack_spec().unwrap().direction(&net).unwrap();
        let s = 0.3;
        let dw = droop.omega_from_slack(s) - droop.omega0;
        for (a, b) in d.iter().zip(&f) {
            assert!((a * dw - b * s).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_pf_recovers_the_joint_slack_solution() {
        let net = case9();
        let model = ExactModel::new(&net);
        for u0 in lossless_ocs(5, 11) {
            for slack in [SlackSpec::single(0), SlackSpec::uniform(&[0, 1, 2]).unwrap()] {
                let truth = solve_feasible(&net, &u0, &slack, &SolverConfig::default()).unwrap();
                let res = solve_po_pf(&model, &net, &u0, &slack, &PoConfig::default()).unwrap();
                let s = res.parameter.unwrap();
                assert!((s - truth.slack_value).abs() <= 1e-8, "{s} vs {}", truth.slack_value);
                assert!(res.rho_hat <= 1e-12);
            }
        }
    }

    #[test]
    fn distributed_slack_moves_generators_equally() {
        let net = case9();
        let u0 = &lossless_ocs(1, 3)[0];
        let res = solve_po_pf(&ExactModel::new(&net), &net, u0, &SlackSpec::uniform(&[0, 1, 2]).unwrap(), &PoConfig::default())
            .unwrap();
        let s = res.parameter.unwrap();
        for j in 0..3 {
            let k = net.layout().gen_pm(j);
            assert!((res.u_solution[k] - u0[k] - s / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stored_residual_matches_a_fresh_evaluation() {
        let net = case9();
        let solver = random_solver(2);
        let u0 = &lossless_ocs(1, 4)[0];
        let res = solve_po_pf(&solver, &net, u0, &SlackSpec::single(0), &PoConfig::default()).unwrap();
        let v = solver.predict_voltage(&res.u_solution).unwrap();
        assert_eq!(res.rho_hat, rho(&assemble_residual(&net, &v, &res.u_solution).unwrap()));
        assert_eq!(res.v_hat, v);
    }

    #[test]
    fn qss_oracle_on_feasible_points_keeps_nominal_frequency() {
        let net = case9();
        let (ds, _) = generate_dataset(&net, &SamplingConfig::new(SamplingMode::Feasible, 5, 9)).unwrap();
        let droop = DroopConfig::from_network(&net);
        for r in &ds.records {
            let res = solve_po_qss(&ExactModel::new(&net), &net, &r.u, &droop, &PoConfig::default()).unwrap();
            assert!((res.parameter.unwrap() - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn qss_oracle_matches_droop_slack_and_is_idempotent() {
        let net = case9();
        let droop = DroopConfig::from_network(&net);
        let model = ExactModel::new(&net);
        let (ds, _) = generate_dataset(&net, &SamplingConfig::new(SamplingMode::Infeasible, 4, 21)).unwrap();
        for r in &ds.records {
            let res = solve_po_qss(&model, &net, &r.u, &droop, &PoConfig::default()).unwrap();
            let w = res.parameter.unwrap();
            let truth = solve_feasible(&net, &r.u, &droop.slack_spec().unwrap(), &SolverConfig::default()).unwrap();
            assert!((w - droop.omega_from_slack(truth.slack_value)).abs() <= 1e-9);

            let u1 = droop_policy(&net, &r.u, &droop, w).unwrap();
            let again = solve_po_qss(&model, &net, &u1, &droop, &PoConfig::default()).unwrap();
            assert!((again.parameter.unwrap() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn opf_with_large_lambda_and_no_cost_reduces_to_slack_recovery() {
        let net = case9();
        let model = ExactModel::new(&net);
        let u0 = lossless_ocs(1, 5).remove(0);
        let pf = solve_po_pf(&model, &net, &u0, &SlackSpec::single(0), &PoConfig::default()).unwrap();

        let mut spec = OpfSpec::generation_cost(&net, 1e-3);
        spec.q_matrix.fill(0.0);
        spec.q_vec.fill(0.0);
        spec.lambda = 1e6;
        spec.lambda_max = 1e6;
        spec.v_bounds = None;
        spec.current_limits = false;
        spec.u_bounds[net.layout().gen_pm(0)] = (-10.0, 10.0);
        let part = ControlPartition::new(vec![net.layout().gen_pm(0)], 12).unwrap();
        let res = solve_po_opf(&model, &net, &spec, &part, &u0, &PoConfig::default()).unwrap();
        let k = net.layout().gen_pm(0);
        assert!((res.u_solution[k] - pf.u_solution[k]).abs() <= 1e-3);
    }

    #[test]
    fn opf_respects_a_binding_voltage_bound() {
        let net = case9();
        let model = ExactModel::new(&net);
        let u0 = solve_feasible(&net, &net.nominal_controls(), &SlackSpec::single(0), &SolverConfig::default())
            .unwrap()
            .u_adjusted;
        // reward raising generator 2's voltage set-point; bus 2's magnitude caps it
        let mut spec = OpfSpec::generation_cost(&net, 1e-3);
        spec.q_matrix.fill(0.0);
        spec.q_vec.fill(0.0);
        let k = net.layout().gen_vref(1);
        spec.q_vec[k] = -1.0;
        spec.u_bounds[k] = (0.9, 1.2);
        spec.current_limits = false;
        let mut vb: Vec<(f64, f64)> = vec![(0.0, 2.0); 9];
        vb[1] = (0.9, 1.0);
        spec.v_bounds = Some(vb);
        spec.penalty_max = 1e10;
        let part = ControlPartition::new(vec![k], 12).unwrap();
        let res = solve_po_opf(&model, &net, &spec, &part, &u0, &PoConfig::default()).unwrap();
        let worst = res.violations.iter().fold(0.0f64, |m, v| m.max(v.amount));
        assert!(worst <= 1e-6, "{:?}", res.violations);
        assert!((res.v_hat.magnitudes[1] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn opf_rejects_out_of_bounds_start() {
        let net = case9();
        let spec = OpfSpec::generation_cost(&net, 1e-3);
        let mut u0 = net.nominal_controls();
        let k = net.layout().gen_pm(1);
        u0[k] = 100.0;
        let part = ControlPartition::new(vec![k], 12).unwrap();
        let err = solve_po_opf(&ExactModel::new(&net), &net, &spec, &part, &u0, &PoConfig::default());
        assert!(matches!(err, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn opf_spec_validation() {
        let net = case9();
        let mut spec = OpfSpec::generation_cost(&net, 1e-3);
        spec.validate(12, 9).unwrap();
        spec.q_matrix[(0, 1)] = 1.0;
        assert!(spec.validate(12, 9).is_err());
        spec.q_matrix[(1, 0)] = 1.0;
        assert!(spec.validate(12, 9).is_err(), "indefinite");
        let mut spec = OpfSpec::generation_cost(&net, 1e-3);
        spec.lambda = 0.0;
        assert!(spec.validate(12, 9).is_err());
    }

    #[test]
    fn grid_oracle_degenerate_and_feasible_points() {
        let net = case9();
        let truth = solve_feasible(&net, &net.nominal_controls(), &SlackSpec::single(0), &SolverConfig::default()).unwrap();
        let k = net.layout().gen_pm(0);
        let spec = OpfSpec::generation_cost(&net, 1e-3);
        let part = ControlPartition::new(vec![k], 12).unwrap();
        let s = truth.u_adjusted[k];
        let grid = GridSpec {
            ranges: vec![(s, s)],
            resolution: 1,
        };
        let table =
            grid_search_oracle(&net, &spec, &part, &truth.u_adjusted, &grid, None, &SolverConfig::default()).unwrap();
        assert_eq!(table.points.len(), 1);
        assert!(table.points[0].rho_exact.unwrap() <= 1e-10);
        assert_eq!(table.argmin_exact, Some(0));
        assert_eq!(table.argmin_predicted, None);

        let grid = GridSpec {
            ranges: vec![(s - 0.2, s + 0.2)],
            resolution: 41,
        };
        let model = ExactModel::new(&net);
        let table = grid_search_oracle(&net, &spec, &part, &truth.u_adjusted, &grid, Some(&model), &SolverConfig::default())
            .unwrap();
        assert!(table.points[20].rho_exact.unwrap() <= 1e-10);
        assert!(table.median_rho_deviation() <= 1e-12);
        let csv = table.to_table(&net.control_labels(), json!({})).to_csv();
        assert_eq!(csv.lines().count(), 2 + 41);
        assert!(csv.contains("exact+predicted"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn predicted_residual_gradient_matches_finite_differences(seed in 0u64..10_000) {
            let net = case9();
            let solver = random_solver(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut u = net.nominal_controls();
            for x in u.entries.iter_mut() {
                *x += rng.random_range(-0.1..0.1);
            }
            let all: Vec<usize> = (0..12).collect();
            let p = predict_residual_and_grad(&solver, &net, &u, &all).unwrap();
            let h = 1e-6;
            let mut worst = 0.0f64;
            for k in 0..12 {
                let mut e = vec![0.0; 12];
                e[k] = 1.0;
                let f = |t: f64| predict_residual_and_grad(&solver, &net, &u.shifted(&e, t), &[]).unwrap().rho;
                let fd = (f(h) - f(-h)) / (2.0 * h);
                worst = worst.max((fd - p.grad[k]).abs() / p.grad.amax().max(1e-3));
            }
            prop_assert!(worst <= 1e-5, "relative error {}", worst);
        }
    }

    #[test]
    fn opf_objective_gradient_matches_finite_differences() {
        let net = case9();
        let solver = random_solver(8);
        let mut spec = OpfSpec::generation_cost(&net, 1e-3);
        spec.lambda_max = 1e3;
        // tight limits so the penalty terms are active
        spec.v_bounds = Some(vec![(0.99, 1.0); 9]);
        spec.angle_limit = Some(0.01);
        let part = ControlPartition::new(vec![net.layout().gen_pm(1), net.layout().gen_pm(2)], 12).unwrap();
        let u = net.nominal_controls();
        let (_, g) = opf_objective_and_grad(&solver, &net, &spec, &part, &u).unwrap();
        for (i, &k) in part.decisions.iter().enumerate() {
            let mut e = vec![0.0; 12];
            e[k] = 1.0;
            let f = |t: f64| opf_objective_and_grad(&solver, &net, &spec, &part, &u.shifted(&e, t)).unwrap().0;
            let h = 1e-6;
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g.amax().max(1.0), "{fd} vs {}", g[i]);
        }
    }
}
