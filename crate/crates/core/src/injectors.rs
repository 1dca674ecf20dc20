//! Current injections of grid components as functions of local voltages.
//!
//! Every current is a phasor in the local frame of its terminal bus, where
//! that bus's voltage is real. Currents flowing into a bus are positive.
//! Only branch-angle differences enter; there is no absolute bus angle.
//!
//! Sign conventions (checked against a complex nodal-admittance balance in
//! the residual module's tests):
//! * phasors follow `S = V·conj(I)` with MATPOWER admittances;
//! * the branch angle is `φ = θ_f − θ_t`, so the far-end voltage appears as
//!   `V_t e^{−jφ}` at the from-end and `V_f e^{+jφ}` at the to-end;
//! * a generator's reactive current is `+j K_V (V − V_ref)`, which injects
//!   `Q = K_V V (V_ref − V)`: a unit below its reference supports the bus.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Branch;

/// Phasor current in a bus's local frame (pu).
pub type ComplexCurrent = Complex64;

/// Magnitudes below this are rejected rather than producing huge currents.
pub const VOLTAGE_FLOOR: f64 = 1e-3;

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadControl {
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorControl {
    pub p_m: f64,
    pub v_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Reactive current per unit of voltage deviation.
    pub k_v: f64,
    pub p_rated: f64,
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_v > 0.0) || !(self.p_rated > 0.0) {
            return Err(Error::Validation(format!(
                "generator parameters must be positive (k_v = {}, p_rated = {})",
                self.k_v, self.p_rated
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_voltage(v: f64, bus: Option<usize>) -> Result<()> {
    if v < VOLTAGE_FLOOR || !v.is_finite() {
        return Err(Error::DegenerateVoltage { bus, magnitude: v });
    }
    Ok(())
}

/// Constant-power load: `i = −P/V − jQ/V`.
pub fn load_current(ctrl: LoadControl, v: f64) -> Result<ComplexCurrent> {
    check_voltage(v, None)?;
    Ok(Complex64::new(-ctrl.p / v, -ctrl.q / v))
}

/// Constant active power with proportional reactive voltage support:
/// `i = P_M/V + j K_V (V − V_ref)`.
pub fn generator_current(ctrl: GeneratorControl, params: GeneratorParams, v: f64) -> Result<ComplexCurrent> {
    check_voltage(v, None)?;
    Ok(Complex64::new(ctrl.p_m / v, params.k_v * (v - ctrl.v_ref)))
}

/// Branch currents injected into the from- and to-bus, each in its own frame.
pub fn branch_terminal_currents(branch: &Branch, v_f: f64, v_t: f64, phi: f64) -> (ComplexCurrent, ComplexCurrent) {
    let rot = Complex64::from_polar(1.0, phi);
    let i_f = -branch.y_ff * v_f - branch.y_ft * v_t * rot.conj();
    let i_t = -branch.y_tf * v_f * rot - branch.y_tt * v_t;
    (i_f, i_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadPartials {
    pub d_v: Complex64,
    pub d_p: Complex64,
    pub d_q: Complex64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorPartials {
    pub d_v: Complex64,
    pub d_pm: Complex64,
    pub d_vref: Complex64,
}

/// Derivatives of one terminal current w.r.t. `(V_f, V_t, φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalPartials {
    pub d_vf: Complex64,
    pub d_vt: Complex64,
    pub d_phi: Complex64,
}

pub fn load_partials(ctrl: LoadControl, v: f64) -> Result<LoadPartials> {
    check_voltage(v, None)?;
    let inv = 1.0 / v;
    Ok(LoadPartials {
        d_v: Complex64::new(ctrl.p * inv * inv, ctrl.q * inv * inv),
        d_p: Complex64::new(-inv, 0.0),
        d_q: Complex64::new(0.0, -inv),
    })
}

pub fn generator_partials(ctrl: GeneratorControl, params: GeneratorParams, v: f64) -> Result<GeneratorPartials> {
    check_voltage(v, None)?;
    Ok(GeneratorPartials {
        d_v: Complex64::new(-ctrl.p_m / (v * v), params.k_v),
        d_pm: Complex64::new(1.0 / v, 0.0),
        d_vref: Complex64::new(0.0, -params.k_v),
    })
}

pub fn branch_partials(branch: &Branch, v_f: f64, v_t: f64, phi: f64) -> (TerminalPartials, TerminalPartials) {
    let rot = Complex64::from_polar(1.0, phi);
    let from = TerminalPartials {
        d_vf: -branch.y_ff,
        d_vt: -branch.y_ft * rot.conj(),
        d_phi: J * branch.y_ft * v_t * rot.conj(),
    };
    let to = TerminalPartials {
        d_vf: -branch.y_tf * rot,
        d_vt: -branch.y_tt,
        d_phi: -J * branch.y_tf * v_f * rot,
    };
    (from, to)
}

/// Extension point for components whose current depends on internal states
/// that are eliminated by their steady-state condition. An implementation
/// resolves the states internally, so it looks like a static single-terminal
/// injector to the residual assembly.
pub trait SteadyStateInjector {
    fn n_controls(&self) -> usize;

    fn current(&self, v: f64, controls: &[f64]) -> Result<ComplexCurrent>;

    /// Returns `(∂i/∂V, ∂i/∂u_k for each control)`.
    fn partials(&self, v: f64, controls: &[f64]) -> Result<(Complex64, Vec<Complex64>)>;
}

/// Constant-power load seen through the extension interface.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantPowerLoad;

impl SteadyStateInjector for ConstantPowerLoad {
    fn n_controls(&self) -> usize {
        2
    }

    fn current(&self, v: f64, controls: &[f64]) -> Result<ComplexCurrent> {
        load_current(LoadControl { p: controls[0], q: controls[1] }, v)
    }

    fn partials(&self, v: f64, controls: &[f64]) -> Result<(Complex64, Vec<Complex64>)> {
        let d = load_partials(LoadControl { p: controls[0], q: controls[1] }, v)?;
        Ok((d.d_v, vec![d.d_p, d.d_q]))
    }
}

/// Voltage-supporting generator seen through the extension interface.
#[derive(Debug, Clone, Copy)]
pub struct VoltageSupportGenerator(pub GeneratorParams);

impl SteadyStateInjector for VoltageSupportGenerator {
    fn n_controls(&self) -> usize {
        2
    }

    fn current(&self, v: f64, controls: &[f64]) -> Result<ComplexCurrent> {
        generator_current(GeneratorControl { p_m: controls[0], v_ref: controls[1] }, self.0, v)
    }

    fn partials(&self, v: f64, controls: &[f64]) -> Result<(Complex64, Vec<Complex64>)> {
        let d = generator_partials(GeneratorControl { p_m: controls[0], v_ref: controls[1] }, self.0, v)?;
        Ok((d.d_v, vec![d.d_pm, d.d_vref]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    /// Central difference of a complex-valued function, relative check.
    fn fd_matches(f: impl Fn(f64) -> Complex64, x: f64, analytic: Complex64) -> bool {
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        (fd - analytic).norm() <= 1e-6 * analytic.norm().max(1.0)
    }

    #[test]
    fn load_examples() {
        let c = |p, q, v| load_current(LoadControl { p, q }, v).unwrap();
        assert_eq!(c(1.0, 0.0, 1.0), Complex64::new(-1.0, 0.0));
        assert_eq!(c(1.0, 0.5, 0.5), Complex64::new(-2.0, -1.0));
        assert_eq!(c(0.0, 0.0, 0.97), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn voltage_floor() {
        let err = load_current(LoadControl { p: 1.0, q: 0.0 }, 5e-4);
        assert!(matches!(err, Err(Error::DegenerateVoltage { .. })));
        let gp = GeneratorParams { k_v: 1.0, p_rated: 1.0 };
        assert!(generator_current(GeneratorControl { p_m: 0.0, v_ref: 1.0 }, gp, 0.0).is_err());
    }

    #[test]
    fn generator_examples() {
        let g = |p_m, v_ref, k_v, v| {
            generator_current(GeneratorControl { p_m, v_ref }, GeneratorParams { k_v, p_rated: 1.0 }, v).unwrap()
        };
        assert_eq!(g(0.0, 1.0, 130.0, 1.0), Complex64::new(0.0, 0.0));
        assert_eq!(g(1.0, 1.0, 130.0, 1.0), Complex64::new(1.0, 0.0));
        let i = g(0.0, 1.05, 21.0, 1.0);
        assert!((i.im.abs() - 1.05).abs() < 1e-12);
        // below reference the unit injects reactive power: Q = V·Im(conj(i)) > 0
        let s = 1.0 * i.conj();
        assert!(s.im > 0.0);
    }

    #[test]
    fn branch_examples() {
        let series = Branch::new(0, 0, 1, 0.0, 0.1, 0.0, 1.0, None);
        let (f, t) = branch_terminal_currents(&series, 1.0, 1.0, 0.0);
        assert!(close(f, Complex64::new(0.0, 0.0), 1e-12) && close(t, Complex64::new(0.0, 0.0), 1e-12));

        let (f, _) = branch_terminal_currents(&series, 1.0, 1.0, 0.1);
        assert!((f.norm() - 10.0 * 2.0 * (0.05f64).sin()).abs() < 1e-12);
        assert!((f.norm() - 0.9996).abs() < 1e-4);

        let (f, _) = branch_terminal_currents(&series, 1.05, 1.0, 0.0);
        assert!((f.norm() - 0.5).abs() < 1e-12);
        assert!(f.re.abs() < 1e-12);
    }

    #[test]
    fn partial_examples() {
        let d = load_partials(LoadControl { p: 1.0, q: 0.0 }, 1.0).unwrap();
        assert_eq!(d.d_v.re, 1.0);
        let gp = GeneratorParams { k_v: 21.0, p_rated: 1.0 };
        for v in [0.9, 1.0, 1.1] {
            let d = generator_partials(GeneratorControl { p_m: 0.3, v_ref: 1.02 }, gp, v).unwrap();
            assert_eq!(d.d_v.im, 21.0);
        }
        let br = Branch::new(0, 0, 1, 0.01, 0.085, 0.176, 1.0, None);
        let (pf, pt) = branch_partials(&br, 1.02, 0.99, 0.0);
        assert!(fd_matches(|x| branch_terminal_currents(&br, 1.02, 0.99, x).0, 0.0, pf.d_phi));
        assert!(fd_matches(|x| branch_terminal_currents(&br, 1.02, 0.99, x).1, 0.0, pt.d_phi));
    }

    #[test]
    fn extension_interface_matches_direct_calls() {
        let gp = GeneratorParams { k_v: 13.0, p_rated: 2.7 };
        let g = VoltageSupportGenerator(gp);
        let (dv, du) = g.partials(1.01, &[0.8, 1.03]).unwrap();
        let direct = generator_partials(GeneratorControl { p_m: 0.8, v_ref: 1.03 }, gp, 1.01).unwrap();
        assert_eq!((dv, du[0], du[1]), (direct.d_v, direct.d_pm, direct.d_vref));
        assert_eq!(ConstantPowerLoad.n_controls(), 2);
        assert_eq!(
            ConstantPowerLoad.current(0.9, &[0.5, 0.1]).unwrap(),
            load_current(LoadControl { p: 0.5, q: 0.1 }, 0.9).unwrap()
        );
    }

    fn arb_branch() -> impl Strategy<Value = Branch> {
        (0.0..0.05f64, 0.02..0.2f64, 0.0..0.4f64, 0.9..1.1f64)
            .prop_map(|(r, x, b, tap)| Branch::new(0, 0, 1, r, x, b, tap, None))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn all_partials_match_central_differences(
            br in arb_branch(),
            vf in 0.8..1.2f64, vt in 0.8..1.2f64, phi in -0.5..0.5f64,
            p in -2.0..2.0f64, q in -1.0..1.0f64, vref in 0.95..1.1f64, k_v in 1.0..150.0f64,
        ) {
            let (pf, pt) = branch_partials(&br, vf, vt, phi);
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, x, vt, phi).0, vf, pf.d_vf));
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, vf, x, phi).0, vt, pf.d_vt));
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, vf, vt, x).0, phi, pf.d_phi));
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, x, vt, phi).1, vf, pt.d_vf));
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, vf, x, phi).1, vt, pt.d_vt));
            prop_assert!(fd_matches(|x| branch_terminal_currents(&br, vf, vt, x).1, phi, pt.d_phi));

            let lc = LoadControl { p, q };
            let dl = load_partials(lc, vf).unwrap();
            prop_assert!(fd_matches(|x| load_current(lc, x).unwrap(), vf, dl.d_v));
            let ok_p = fd_matches(|x| load_current(LoadControl { p: x, q }, vf).unwrap(), p, dl.d_p);
            let ok_q = fd_matches(|x| load_current(LoadControl { p, q: x }, vf).unwrap(), q, dl.d_q);
            prop_assert!(ok_p && ok_q);

            let gp = GeneratorParams { k_v, p_rated: 1.0 };
            let gc = GeneratorControl { p_m: p, v_ref: vref };
            let dg = generator_partials(gc, gp, vt).unwrap();
            prop_assert!(fd_matches(|x| generator_current(gc, gp, x).unwrap(), vt, dg.d_v));
            let ok_pm = fd_matches(|x| generator_current(GeneratorControl { p_m: x, v_ref: vref }, gp, vt).unwrap(), p, dg.d_pm);
            let ok_vref = fd_matches(|x| generator_current(GeneratorControl { p_m: p, v_ref: x }, gp, vt).unwrap(), vref, dg.d_vref);
            prop_assert!(ok_pm && ok_vref);
        }

        #[test]
        fn reversing_a_branch_swaps_terminal_currents(br in arb_branch(), vf in 0.8..1.2f64, vt in 0.8..1.2f64, phi in -0.5..0.5f64) {
            let (f, t) = branch_terminal_currents(&br, vf, vt, phi);
            let (f2, t2) = branch_terminal_currents(&br.reversed(), vt, vf, -phi);
            prop_assert!(close(f, t2, 1e-12) && close(t, f2, 1e-12));
        }

        #[test]
        fn lossless_branches_dissipate_nothing(x in 0.02..0.2f64, b in 0.0..0.4f64, vf in 0.8..1.2f64, vt in 0.8..1.2f64, phi in -0.5..0.5f64) {
            let br = Branch::new(0, 0, 1, 0.0, x, b, 1.0, None);
            let (f, t) = branch_terminal_currents(&br, vf, vt, phi);
            // Power is frame invariant, so each end can be evaluated locally.
            let p = (vf * f.conj()).re + (vt * t.conj()).re;
            prop_assert!(p.abs() <= 1e-12);
        }
    }
}
