//! Least-infeasibility solves.
//!
//! [`solve_rpf`] finds `v* = argmin_v ρ(v; u)` for fixed controls.
//! [`solve_feasible`] additionally moves a scalar slack along a generator
//! participation direction until `ρ` vanishes, as one joint least-squares
//! problem over `(v, s)`. Both use Levenberg–Marquardt with a Gauss–Newton
//! model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::residual::{
    assemble_residual, full_control_jacobian, residual_jacobian, residual_norm, ResidualVector, ResidualWeights,
    SlackSpec, Wrt,
};
use crate::state::{ControlVector, VoltageState};

/// Threshold on `ρ` below which a solution counts as AC-feasible.
pub const FEASIBILITY_TOL: f64 = 1e-10;

const MAGNITUDE_FLOOR: f64 = crate::injectors::VOLTAGE_FLOOR;
const ANGLE_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-6;
const LAMBDA_MAX: f64 = 1e16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Flat,
    Warm(VoltageState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub lm_lambda0: f64,
    pub lm_factor: f64,
    pub init: Init,
    /// Diagonal residual weights; identity when absent.
    pub weights: Option<ResidualWeights>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            lm_lambda0: 1e-3,
            lm_factor: 10.0,
            init: Init::Flat,
            weights: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0
            || !(self.grad_tol > 0.0)
            || !(self.step_tol > 0.0)
            || !(self.lm_lambda0 > 0.0)
            || !(self.lm_factor > 1.0)
        {
            return Err(Error::Validation(
                "solver tolerances and damping must be positive, max_iter ≥ 1, factor > 1".into(),
            ));
        }
        Ok(())
    }

    pub fn warm(mut self, v: VoltageState) -> Self {
        self.init = Init::Warm(v);
        self
    }

    fn initial_state(&self, network: &Network) -> VoltageState {
        match &self.init {
            Init::Flat => VoltageState::flat(network.n_buses(), network.n_branches()),
            Init::Warm(v) => v.clone(),
        }
    }

    fn weights(&self, network: &Network) -> ResidualWeights {
        self.weights
            .clone()
            .unwrap_or_else(|| ResidualWeights::identity(network.n_residuals()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpfSolution {
    pub v_star: VoltageState,
    pub rho: f64,
    pub residual: ResidualVector,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Jᵀ W r‖_∞` at `v_star`.
    pub grad_norm: f64,
    /// `ρ` after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSolution {
    pub v_star: VoltageState,
    pub u_adjusted: ControlVector,
    /// Scalar slack `s`; generator `g` moves by `factor_g · s`.
    pub slack_value: f64,
    pub rho: f64,
    pub iterations: usize,
}

struct LmOutcome {
    x: DVector<f64>,
    r: ResidualVector,
    rho: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Clamps `x` into the solver domain; returns whether anything moved.
/// Only the first `n_buses + n_branches` entries are voltage variables.
fn clamp_domain(x: &mut DVector<f64>, n_buses: usize, n_branches: usize) -> bool {
    let mut clamped = false;
    for k in 0..n_buses {
        if x[k] < MAGNITUDE_FLOOR {
            x[k] = MAGNITUDE_FLOOR;
            clamped = true;
        }
    }
    for k in n_buses..n_buses + n_branches {
        if x[k].abs() > ANGLE_LIMIT {
            x[k] = x[k].clamp(-ANGLE_LIMIT, ANGLE_LIMIT);
            clamped = true;
        }
    }
    clamped
}

/// Levenberg–Marquardt on a residual function `eval(x) -> (r, J)`.
fn levenberg_marquardt(
    x0: DVector<f64>,
    n_buses: usize,
    n_branches: usize,
    weights: &ResidualWeights,
    cfg: &SolverConfig,
    eval: impl Fn(&DVector<f64>) -> Result<(ResidualVector, DMatrix<f64>)>,
) -> Result<LmOutcome> {
    cfg.validate()?;
    let w = DVector::from_column_slice(weights.as_slice());
    let mut x = x0;
    let (mut r, mut jac) = eval(&x)?;
    let mut rho = residual_norm(&r, weights);
    let mut history = vec![rho];
    let mut lambda = cfg.lm_lambda0;
    let mut iterations = 0;
    let mut converged = false;

    let weighted_grad = |r: &ResidualVector, jac: &DMatrix<f64>| -> DVector<f64> {
        jac.transpose() * r.as_dvector().component_mul(&w)
    };
    let mut grad = weighted_grad(&r, &jac);

    while iterations < cfg.max_iter {
        if grad.amax() <= cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let wj = DMatrix::from_fn(jac.nrows(), jac.ncols(), |i, j| w[i] * jac[(i, j)]);
        let mut normal = jac.transpose() * wj;
        for k in 0..normal.nrows() {
            normal[(k, k)] += lambda;
        }
        let Some(chol) = normal.cholesky() else {
            lambda *= cfg.lm_factor;
            continue;
        };
        let step = chol.solve(&(-&grad));
        let small_step = step.norm() <= cfg.step_tol * (1.0 + x.norm());

        let mut candidate = &x + &step;
        let clamped = clamp_domain(&mut candidate, n_buses, n_branches);
        let accepted = if clamped {
            false
        } else {
            match eval(&candidate) {
                Ok((r_new, jac_new)) => {
                    let rho_new = residual_norm(&r_new, weights);
                    if rho_new < rho {
                        x = candidate;
                        r = r_new;
                        jac = jac_new;
                        rho = rho_new;
                        grad = weighted_grad(&r, &jac);
                        history.push(rho);
                        true
                    } else {
                        false
                    }
                }
                Err(Error::DegenerateVoltage { .. }) => false,
                Err(e) => return Err(e),
            }
        };
        if accepted {
            lambda = (lambda / cfg.lm_factor).max(1e-20);
        } else {
            lambda *= cfg.lm_factor;
        }
        if small_step || lambda > LAMBDA_MAX {
            converged = small_step || grad.amax() <= cfg.grad_tol;
            break;
        }
    }
    if !converged && grad.amax() <= cfg.grad_tol {
        converged = true;
    }
    Ok(LmOutcome {
        grad_norm: grad.amax(),
        x,
        r,
        rho,
        iterations,
        converged,
        history,
    })
}

fn check_controls(network: &Network, u: &ControlVector) -> Result<()> {
    if u.len() != network.n_controls() {
        return Err(Error::Validation(format!(
            "control vector has {} entries, network needs {}",
            u.len(),
            network.n_controls()
        )));
    }
    Ok(())
}

/// `argmin_v ρ(v; u)`. A non-converged run is returned with `converged = false`.
pub fn solve_rpf(network: &Network, u: &ControlVector, cfg: &SolverConfig) -> Result<RpfSolution> {
    check_controls(network, u)?;
    let n = network.n_buses();
    let v0 = cfg.initial_state(network);
    let weights = cfg.weights(network);
    let out = levenberg_marquardt(
        DVector::from_vec(v0.to_flat()),
        n,
        network.n_branches(),
        &weights,
        cfg,
        |x| {
            let v = VoltageState::from_flat(x.as_slice(), n);
            Ok((
                assemble_residual(network, &v, u)?,
                residual_jacobian(network, &v, u, &Wrt::Voltage)?,
            ))
        },
    )?;
    if !out.converged {
        log::debug!("solve_rpf stopped after {} iterations at rho = {:e}", out.iterations, out.rho);
    }
    Ok(RpfSolution {
        v_star: VoltageState::from_flat(out.x.as_slice(), n),
        rho: out.rho,
        residual: out.r,
        iterations: out.iterations,
        converged: out.converged,
        grad_norm: out.grad_norm,
        history: out.history,
    })
}

/// Joint solve over `(v, s)` with `u = u0 + s·d`, where `d` spreads the slack
/// over the participating generators' mechanical power.
pub fn solve_feasible(
    network: &Network,
    u0: &ControlVector,
    slack: &SlackSpec,
    cfg: &SolverConfig,
) -> Result<FeasibleSolution> {
    check_controls(network, u0)?;
    let n = network.n_buses();
    let nv = network.n_voltage_vars();
    let d = slack.direction(network)?;
    let d_vec = DVector::from_column_slice(&d);
    let weights = cfg.weights(network);

    let mut x0 = DVector::zeros(nv + 1);
    x0.rows_mut(0, nv).copy_from_slice(&cfg.initial_state(network).to_flat());
    let out = levenberg_marquardt(x0, n, network.n_branches(), &weights, cfg, |x| {
        let v = VoltageState::from_flat(&x.as_slice()[..nv], n);
        let u = u0.shifted(&d, x[nv]);
        let r = assemble_residual(network, &v, &u)?;
        let jv = residual_jacobian(network, &v, &u, &Wrt::Voltage)?;
        let ju = full_control_jacobian(network, &v, &u)?;
        let mut jac = DMatrix::zeros(jv.nrows(), nv + 1);
        jac.columns_mut(0, nv).copy_from(&jv);
        jac.set_column(nv, &(ju * &d_vec));
        Ok((r, jac))
    })?;

    if out.rho > FEASIBILITY_TOL {
        return Err(if out.converged {
            Error::InfeasibleRegion { rho: out.rho }
        } else {
            Error::NotConverged {
                iterations: out.iterations,
                rho: out.rho,
            }
        });
    }
    let s = out.x[nv];
    Ok(FeasibleSolution {
        v_star: VoltageState::from_flat(&out.x.as_slice()[..nv], n),
        u_adjusted: u0.shifted(&d, s),
        slack_value: s,
        rho: out.rho,
        iterations: out.iterations,
    })
}

/// Test oracle for [`solve_feasible`]: the nested form
/// `min_s min_v ρ(v; u0 + s·d)`, with the outer scalar problem solved by
/// golden-section search on `‖r‖` over `bracket`. Much slower than the joint
/// solve; intended for cross-checking only.
pub fn nested_slack_oracle(
    network: &Network,
    u0: &ControlVector,
    slack: &SlackSpec,
    cfg: &SolverConfig,
    bracket: (f64, f64),
    tol: f64,
) -> Result<(f64, RpfSolution)> {
    let d = slack.direction(network)?;
    let inner = |s: f64| -> Result<RpfSolution> { solve_rpf(network, &u0.shifted(&d, s), cfg) };
    let objective = |sol: &RpfSolution| (2.0 * sol.rho).sqrt();

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = bracket;
    let mut c = b - inv_phi * (b - a);
    let mut e = a + inv_phi * (b - a);
    let mut fc = objective(&inner(c)?);
    let mut fe = objective(&inner(e)?);
    while (b - a).abs() > tol {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - inv_phi * (b - a);
            fc = objective(&inner(c)?);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + inv_phi * (b - a);
            fe = objective(&inner(e)?);
        }
    }
    let s = 0.5 * (a + b);
    Ok((s, inner(s)?))
}

/// Active power dissipated in branches and bus shunts at state `v`.
pub fn active_losses(network: &Network, v: &VoltageState) -> f64 {
    use crate::injectors::branch_terminal_currents;
    let vm = &v.magnitudes;
    let branch: f64 = network
        .branches
        .iter()
        .zip(&v.branch_angles)
        .map(|(br, &phi)| {
            let (i_f, i_t) = branch_terminal_currents(br, vm[br.from], vm[br.to], phi);
            // power entering the branch is V·conj(−i) at each end
            -(vm[br.from] * i_f.conj()).re - (vm[br.to] * i_t.conj()).re
        })
        .sum();
    let shunt: f64 = network.buses.iter().map(|b| b.shunt.re * vm[b.index] * vm[b.index]).sum();
    branch + shunt
}
