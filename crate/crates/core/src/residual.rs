//! Kirchhoff residuals `r(v; u)`, their norm `ρ` and analytic Jacobians.
//!
//! The residual stacks, in this order:
//! * `Re c_n` for every bus, where `c_n` is the sum of all currents injected
//!   at bus `n` in that bus's frame (current law);
//! * `Im c_n` for every bus;
//! * `d_ℓ = y_ℓ Σ o_k φ_k` for every fundamental cycle (voltage law).
//!
//! [`ybus_oracle_mismatch`] recomputes the current law through a
//! conventional nodal-admittance matrix and absolute bus angles, and serves
//! as an independent check on the assembly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injectors::{
    branch_partials, branch_terminal_currents, check_voltage, generator_current, generator_partials,
    load_current, load_partials, GeneratorControl, LoadControl,
};
use crate::network::Network;
use crate::state::{ControlVector, VoltageState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub values: Vec<f64>,
}

impl ResidualVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// The current-law entries `(Re c_n, Im c_n)` of bus `n`.
    pub fn kcl(&self, n_buses: usize, bus: usize) -> Complex64 {
        Complex64::new(self.values[bus], self.values[n_buses + bus])
    }
}

/// Diagonal positive weights on the residual entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualWeights {
    w: Vec<f64>,
}

impl ResidualWeights {
    pub fn identity(len: usize) -> Self {
        Self { w: vec![1.0; len] }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::Validation("residual weights must be positive and finite".into()));
        }
        Ok(Self { w })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlackMode {
    Single,
    Distributed,
}

/// Which generators absorb the power imbalance, and in what proportion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackSpec {
    pub mode: SlackMode,
    /// `(generator index, participation factor)`.
    pub targets: Vec<(usize, f64)>,
}

impl SlackSpec {
    pub fn single(generator: usize) -> Self {
        Self {
            mode: SlackMode::Single,
            targets: vec![(generator, 1.0)],
        }
    }

    pub fn distributed(targets: Vec<(usize, f64)>) -> Result<Self> {
        let spec = Self {
            mode: SlackMode::Distributed,
            targets,
        };
        spec.validate(usize::MAX)?;
        Ok(spec)
    }

    /// Equal participation of every listed generator.
    pub fn uniform(generators: &[usize]) -> Result<Self> {
        let f = 1.0 / generators.len().max(1) as f64;
        Self::distributed(generators.iter().map(|&g| (g, f)).collect())
    }

    pub fn validate(&self, n_gens: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Validation("slack needs at least one generator".into()));
        }
        if self.targets.iter().any(|&(g, f)| g >= n_gens || !(f >= 0.0)) {
            return Err(Error::Validation(
                "slack targets must be existing generators with non-negative factors".into(),
            ));
        }
        let sum: f64 = self.targets.iter().map(|t| t.1).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("slack participation factors sum to {sum}, not 1")));
        }
        if self.mode == SlackMode::Single && self.targets.len() != 1 {
            return Err(Error::Validation("single slack takes exactly one generator".into()));
        }
        Ok(())
    }

    /// Control-space direction `d` such that the slack moves `u` to `u + s·d`.
    pub fn direction(&self, network: &Network) -> Result<Vec<f64>> {
        self.validate(network.generators.len())?;
        let mut d = vec![0.0; network.n_controls()];
        for &(g, f) in &self.targets {
            d[network.layout().gen_pm(g)] += f;
        }
        Ok(d)
    }
}

fn check_shapes(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<()> {
    if v.magnitudes.len() != network.n_buses() || v.branch_angles.len() != network.n_branches() {
        return Err(Error::Validation(format!(
            "voltage state has {}+{} entries, network needs {}+{}",
            v.magnitudes.len(),
            v.branch_angles.len(),
            network.n_buses(),
            network.n_branches()
        )));
    }
    if u.len() != network.n_controls() {
        return Err(Error::Validation(format!(
            "control vector has {} entries, network needs {}",
            u.len(),
            network.n_controls()
        )));
    }
    for (n, &vm) in v.magnitudes.iter().enumerate() {
        check_voltage(vm, Some(n))?;
    }
    Ok(())
}

fn load_control(network: &Network, u: &ControlVector, i: usize) -> LoadControl {
    let l = network.layout();
    LoadControl {
        p: u[l.load_p(i)],
        q: u[l.load_q(i)],
    }
}

fn generator_control(network: &Network, u: &ControlVector, j: usize) -> GeneratorControl {
    let l = network.layout();
    GeneratorControl {
        p_m: u[l.gen_pm(j)],
        v_ref: u[l.gen_vref(j)],
    }
}

/// Current injected by loads and generators only (no branches or shunts)
/// at every bus, each in its own frame.
pub fn injector_currents(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<Vec<Complex64>> {
    check_shapes(network, v, u)?;
    let vm = &v.magnitudes;
    let mut c = vec![Complex64::new(0.0, 0.0); network.n_buses()];
    for (i, load) in network.loads.iter().enumerate() {
        c[load.bus] += load_current(load_control(network, u, i), vm[load.bus])?;
    }
    for (j, g) in network.generators.iter().enumerate() {
        c[g.bus] += generator_current(generator_control(network, u, j), g.params, vm[g.bus])?;
    }
    Ok(c)
}

/// Net injected current at every bus, each in its own frame.
pub fn bus_currents(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<Vec<Complex64>> {
    check_shapes(network, v, u)?;
    let vm = &v.magnitudes;
    let mut c: Vec<Complex64> = network
        .buses
        .iter()
        .map(|b| -b.shunt * vm[b.index])
        .collect();
    for (i, load) in network.loads.iter().enumerate() {
        c[load.bus] += load_current(load_control(network, u, i), vm[load.bus])?;
    }
    for (j, g) in network.generators.iter().enumerate() {
        c[g.bus] += generator_current(generator_control(network, u, j), g.params, vm[g.bus])?;
    }
    for (br, &phi) in network.branches.iter().zip(&v.branch_angles) {
        let (i_f, i_t) = branch_terminal_currents(br, vm[br.from], vm[br.to], phi);
        c[br.from] += i_f;
        c[br.to] += i_t;
    }
    Ok(c)
}

/// Scaled voltage-law residual of every cycle.
pub fn cycle_residuals(network: &Network, v: &VoltageState) -> Vec<f64> {
    network
        .cycles
        .iter()
        .map(|cy| {
            let sum: f64 = cy
                .branch_ids
                .iter()
                .zip(&cy.orientations)
                .map(|(&k, &o)| f64::from(o) * v.branch_angles[k])
                .sum();
            cy.y_scale * sum
        })
        .collect()
}

pub fn assemble_residual(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<ResidualVector> {
    let c = bus_currents(network, v, u)?;
    let mut values = Vec::with_capacity(network.n_residuals());
    values.extend(c.iter().map(|z| z.re));
    values.extend(c.iter().map(|z| z.im));
    values.extend(cycle_residuals(network, v));
    Ok(ResidualVector { values })
}

/// `ρ = ½ Σ w_i r_i²`.
pub fn residual_norm(r: &ResidualVector, w: &ResidualWeights) -> f64 {
    assert_eq!(r.len(), w.len(), "residual and weight lengths differ");
    0.5 * r.values.iter().zip(&w.w).map(|(x, wi)| wi * x * x).sum::<f64>()
}

/// `ρ` with identity weights.
pub fn rho(r: &ResidualVector) -> f64 {
    0.5 * r.values.iter().map(|x| x * x).sum::<f64>()
}

/// Variables to differentiate against.
#[derive(Debug, Clone, PartialEq)]
pub enum Wrt {
    /// All voltage variables `[V_1..V_N, φ_1..φ_B]`.
    Voltage,
    /// A subset of control entries, in the order given.
    Controls(Vec<usize>),
}

pub fn residual_jacobian(network: &Network, v: &VoltageState, u: &ControlVector, wrt: &Wrt) -> Result<DMatrix<f64>> {
    check_shapes(network, v, u)?;
    match wrt {
        Wrt::Voltage => voltage_jacobian(network, v, u),
        Wrt::Controls(cols) => control_jacobian(network, v, u, cols),
    }
}

fn put(jac: &mut DMatrix<f64>, n_buses: usize, bus: usize, col: usize, d: Complex64) {
    jac[(bus, col)] += d.re;
    jac[(n_buses + bus, col)] += d.im;
}

fn voltage_jacobian(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<DMatrix<f64>> {
    let n = network.n_buses();
    let vm = &v.magnitudes;
    let mut jac = DMatrix::zeros(network.n_residuals(), network.n_voltage_vars());
    for b in &network.buses {
        put(&mut jac, n, b.index, b.index, -b.shunt);
    }
    for (i, load) in network.loads.iter().enumerate() {
        let d = load_partials(load_control(network, u, i), vm[load.bus])?;
        put(&mut jac, n, load.bus, load.bus, d.d_v);
    }
    for (j, g) in network.generators.iter().enumerate() {
        let d = generator_partials(generator_control(network, u, j), g.params, vm[g.bus])?;
        put(&mut jac, n, g.bus, g.bus, d.d_v);
    }
    for (br, &phi) in network.branches.iter().zip(&v.branch_angles) {
        let (pf, pt) = branch_partials(br, vm[br.from], vm[br.to], phi);
        let col_phi = n + br.id;
        put(&mut jac, n, br.from, br.from, pf.d_vf);
        put(&mut jac, n, br.from, br.to, pf.d_vt);
        put(&mut jac, n, br.from, col_phi, pf.d_phi);
        put(&mut jac, n, br.to, br.from, pt.d_vf);
        put(&mut jac, n, br.to, br.to, pt.d_vt);
        put(&mut jac, n, br.to, col_phi, pt.d_phi);
    }
    for (l, cy) in network.cycles.iter().enumerate() {
        for (&k, &o) in cy.branch_ids.iter().zip(&cy.orientations) {
            jac[(2 * n + l, n + k)] += cy.y_scale * f64::from(o);
        }
    }
    Ok(jac)
}

fn control_jacobian(network: &Network, v: &VoltageState, u: &ControlVector, cols: &[usize]) -> Result<DMatrix<f64>> {
    use crate::state::ControlField;
    let n = network.n_buses();
    let layout = network.layout();
    let mut jac = DMatrix::zeros(network.n_residuals(), cols.len());
    for (c, &idx) in cols.iter().enumerate() {
        if idx >= layout.len() {
            return Err(Error::Validation(format!("control index {idx} out of range")));
        }
        let (k, field) = layout.locate(idx);
        match field {
            ControlField::LoadP | ControlField::LoadQ => {
                let bus = network.loads[k].bus;
                let d = load_partials(load_control(network, u, k), v.magnitudes[bus])?;
                let val = if field == ControlField::LoadP { d.d_p } else { d.d_q };
                put(&mut jac, n, bus, c, val);
            }
            ControlField::GenPm | ControlField::GenVref => {
                let g = &network.generators[k];
                let d = generator_partials(generator_control(network, u, k), g.params, v.magnitudes[g.bus])?;
                let val = if field == ControlField::GenPm { d.d_pm } else { d.d_vref };
                put(&mut jac, n, g.bus, c, val);
            }
        }
    }
    Ok(jac)
}

/// Jacobian with respect to every control entry.
pub fn full_control_jacobian(network: &Network, v: &VoltageState, u: &ControlVector) -> Result<DMatrix<f64>> {
    let cols: Vec<usize> = (0..network.n_controls()).collect();
    residual_jacobian(network, v, u, &Wrt::Controls(cols))
}

/// `∇_v ρ = Jᵀ W r`.
pub fn gradient(jac: &DMatrix<f64>, r: &ResidualVector, w: &ResidualWeights) -> DVector<f64> {
    let wr = DVector::from_iterator(r.len(), r.values.iter().zip(w.as_slice()).map(|(x, wi)| x * wi));
    jac.transpose() * wr
}

/// Absolute bus angles from branch angles along the spanning tree, with the
/// reference bus at zero. Fails when the branch angles violate the voltage law.
pub fn reconstruct_bus_angles(network: &Network, v: &VoltageState, ref_bus: usize) -> Result<Vec<f64>> {
    let max_kvl = cycle_residuals(network, v).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if max_kvl > 1e-9 {
        return Err(Error::AngleInconsistency { max_kvl });
    }
    let tree = network.tree();
    let mut theta = vec![0.0; network.n_buses()];
    for &bus in &tree.order {
        if let Some((parent, k)) = tree.parent[bus] {
            let br = &network.branches[k];
            let phi = v.branch_angles[k];
            theta[bus] = if br.from == parent {
                theta[parent] - phi
            } else {
                theta[parent] + phi
            };
        }
    }
    let offset = theta[ref_bus];
    Ok(theta.into_iter().map(|t| t - offset).collect())
}

/// Nodal-admittance matrix including bus shunts.
pub fn ybus(network: &Network) -> DMatrix<Complex64> {
    let n = network.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in &network.branches {
        y[(br.from, br.from)] += br.y_ff;
        y[(br.from, br.to)] += br.y_ft;
        y[(br.to, br.from)] += br.y_tf;
        y[(br.to, br.to)] += br.y_tt;
    }
    for b in &network.buses {
        y[(b.index, b.index)] += b.shunt;
    }
    y
}

/// Verification oracle: per-bus complex current mismatch in the common
/// frame of `ref_bus`, computed as injector currents minus `Y·V`.
pub fn ybus_oracle_mismatch(
    network: &Network,
    v: &VoltageState,
    u: &ControlVector,
    ref_bus: usize,
) -> Result<Vec<Complex64>> {
    check_shapes(network, v, u)?;
    let theta = reconstruct_bus_angles(network, v, ref_bus)?;
    let n = network.n_buses();
    let vm = &v.magnitudes;
    let volts = DVector::from_iterator(n, (0..n).map(|k| Complex64::from_polar(vm[k], theta[k])));
    let nodal = ybus(network) * &volts;

    let injected = injector_currents(network, v, u)?;
    Ok((0..n)
        .map(|k| injected[k] * Complex64::from_polar(1.0, theta[k]) - nodal[k])
        .collect())
}

/// `label,value` rows with a header, for plotting and diffing.
pub fn labeled_csv(labels: &[String], values: &[f64]) -> String {
    let mut out = String::from("label,value\n");
    for (l, x) in labels.iter().zip(values) {
        out.push_str(&format!("{l},{x}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injectors::GeneratorParams;
    use crate::network::{case9, Branch, Bus, Generator, Load};
    use proptest::prelude::*;

    fn bus(index: usize) -> Bus {
        Bus {
            index,
            id: index + 1,
            name: format!("bus{}", index + 1),
            base_kv: 1.0,
            bus_type: 1,
            shunt: Complex64::new(0.0, 0.0),
            vmin: 0.9,
            vmax: 1.1,
        }
    }

    fn two_bus(loads: Vec<Load>) -> Network {
        let br = Branch::new(0, 0, 1, 0.0, 0.1, 0.0, 1.0, None);
        Network::from_parts(100.0, vec![bus(0), bus(1)], vec![br], loads, vec![]).unwrap()
    }

    fn triangle() -> Network {
        let branches = vec![
            Branch::new(0, 0, 1, 0.01, 0.1, 0.02, 1.0, None),
            Branch::new(1, 1, 2, 0.01, 0.1, 0.02, 1.0, None),
            Branch::new(2, 2, 0, 0.01, 0.1, 0.02, 1.0, None),
        ];
        let gen = Generator {
            bus: 0,
            p: 0.5,
            v_ref: 1.02,
            p_max: 2.0,
            p_min: 0.0,
            params: GeneratorParams { k_v: 20.0, p_rated: 1.0 },
            cost: None,
        };
        let loads = vec![Load { bus: 1, p: 0.3, q: 0.1 }, Load { bus: 2, p: 0.2, q: 0.05 }];
        Network::from_parts(100.0, (0..3).map(bus).collect(), branches, loads, vec![gen]).unwrap()
    }

    #[test]
    fn two_bus_flat_is_zero() {
        let net = two_bus(vec![]);
        let r = assemble_residual(&net, &VoltageState::flat(2, 1), &ControlVector::new(vec![])).unwrap();
        assert_eq!(r.values, vec![0.0; 4]);
    }

    #[test]
    fn two_bus_with_load_leaves_load_current() {
        let net = two_bus(vec![Load { bus: 1, p: 1.0, q: 0.0 }]);
        let u = ControlVector::new(vec![1.0, 0.0]);
        let r = assemble_residual(&net, &VoltageState::flat(2, 1), &u).unwrap();
        assert_eq!(r.values, vec![0.0, -1.0, 0.0, 0.0]);
        let mism = ybus_oracle_mismatch(&net, &VoltageState::flat(2, 1), &u, 0).unwrap();
        assert!((mism[1].norm() - 1.0).abs() < 1e-12);
        assert!(mism[0].norm() < 1e-12);
    }

    #[test]
    fn triangle_kvl_sums_oriented_angles() {
        let branches: Vec<_> = (0..3).map(|k| Branch::new(k, k, (k + 1) % 3, 0.0, 0.1, 0.0, 1.0, None)).collect();
        let net = Network::from_parts(100.0, (0..3).map(bus).collect(), branches, vec![], vec![]).unwrap();
        let v = VoltageState {
            magnitudes: vec![1.0; 3],
            branch_angles: vec![0.1; 3],
        };
        let r = assemble_residual(&net, &v, &ControlVector::new(vec![])).unwrap();
        let y = net.cycles[0].y_scale;
        assert!((r.values[6] - y * 0.3).abs() < 1e-12);
        assert!(matches!(
            ybus_oracle_mismatch(&net, &v, &ControlVector::new(vec![]), 0),
            Err(Error::AngleInconsistency { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        let r = ResidualVector { values: vec![3.0, 4.0] };
        assert_eq!(residual_norm(&r, &ResidualWeights::identity(2)), 12.5);
        assert_eq!(residual_norm(&r, &ResidualWeights::new(vec![2.0, 2.0]).unwrap()), 25.0);
        let zero = ResidualVector { values: vec![0.0; 2] };
        assert_eq!(residual_norm(&zero, &ResidualWeights::identity(2)), 0.0);
        assert!(ResidualWeights::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn jacobian_structure() {
        let net = two_bus(vec![Load { bus: 1, p: 1.0, q: 0.0 }]);
        let v = VoltageState {
            magnitudes: vec![1.0, 0.95],
            branch_angles: vec![0.0],
        };
        let u = ControlVector::new(vec![1.0, 0.2]);
        let ju = residual_jacobian(&net, &v, &u, &Wrt::Controls(vec![0])).unwrap();
        assert!((ju[(1, 0)] + 1.0 / 0.95).abs() < 1e-15);
        assert_eq!(ju[(0, 0)], 0.0);

        let net = case9();
        let v = VoltageState::flat(9, 9);
        let u = net.nominal_controls();
        let jv = residual_jacobian(&net, &v, &u, &Wrt::Voltage).unwrap();
        let cy = &net.cycles[0];
        for k in 0..9 {
            let expected = cy
                .branch_ids
                .iter()
                .position(|&b| b == k)
                .map_or(0.0, |p| cy.y_scale * f64::from(cy.orientations[p]));
            assert_eq!(jv[(18, 9 + k)], expected);
        }
        // branch-angle columns only touch their two terminal buses
        for br in &net.branches {
            for bus in 0..9 {
                if bus != br.from && bus != br.to {
                    assert_eq!(jv[(bus, 9 + br.id)], 0.0);
                    assert_eq!(jv[(9 + bus, 9 + br.id)], 0.0);
                }
            }
        }
    }

    #[test]
    fn slack_spec_validation() {
        let net = case9();
        let d = SlackSpec::uniform(&[0, 1, 2]).unwrap().direction(&net).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(SlackSpec::distributed(vec![(0, 0.5), (1, 0.2)]).is_err());
        assert!(SlackSpec::single(7).direction(&net).is_err());
    }

    #[test]
    fn csv_rows() {
        let csv = labeled_csv(&["a".into(), "b".into()], &[1.5, -2.0]);
        assert_eq!(csv, "label,value\na,1.5\nb,-2\n");
    }

    fn perturbed_state(net: &Network, seed: &[f64]) -> VoltageState {
        let mut v = VoltageState::flat(net.n_buses(), net.n_branches());
        for (k, m) in v.magnitudes.iter_mut().enumerate() {
            *m += 0.1 * seed[k % seed.len()];
        }
        for (k, a) in v.branch_angles.iter_mut().enumerate() {
            *a += 0.2 * seed[(k + 3) % seed.len()];
        }
        v
    }

    /// Angles obtained from arbitrary bus angles, so the voltage law holds.
    fn kvl_consistent_state(net: &Network, seed: &[f64]) -> VoltageState {
        let theta: Vec<f64> = (0..net.n_buses()).map(|k| 0.15 * seed[(k + 1) % seed.len()]).collect();
        VoltageState {
            magnitudes: (0..net.n_buses()).map(|k| 1.0 + 0.08 * seed[k % seed.len()]).collect(),
            branch_angles: net.branches.iter().map(|b| theta[b.from] - theta[b.to]).collect(),
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn jacobians_match_central_differences(seed in prop::collection::vec(-1.0..1.0f64, 7)) {
            let net = case9();
            let v = perturbed_state(&net, &seed);
            let u = net.nominal_controls();
            let jv = residual_jacobian(&net, &v, &u, &Wrt::Voltage).unwrap();
            let x = v.to_flat();
            let h = 1e-6;
            for col in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[col] += h;
                xm[col] -= h;
                let rp = assemble_residual(&net, &VoltageState::from_flat(&xp, 9), &u).unwrap();
                let rm = assemble_residual(&net, &VoltageState::from_flat(&xm, 9), &u).unwrap();
                for row in 0..rp.len() {
                    let fd = (rp.values[row] - rm.values[row]) / (2.0 * h);
                    prop_assert!(rel_close(fd, jv[(row, col)], 1e-6), "row {row} col {col}: {fd} vs {}", jv[(row, col)]);
                }
            }
            let ju = full_control_jacobian(&net, &v, &u).unwrap();
            for col in 0..u.len() {
                let (mut up, mut um) = (u.clone(), u.clone());
                up[col] += h;
                um[col] -= h;
                let rp = assemble_residual(&net, &v, &up).unwrap();
                let rm = assemble_residual(&net, &v, &um).unwrap();
                for row in 0..rp.len() {
                    let fd = (rp.values[row] - rm.values[row]) / (2.0 * h);
                    prop_assert!(rel_close(fd, ju[(row, col)], 1e-6));
                }
            }
        }

        #[test]
        fn gradient_matches_rho_differences(seed in prop::collection::vec(-1.0..1.0f64, 5)) {
            let net = case9();
            let v = perturbed_state(&net, &seed);
            let u = net.nominal_controls();
            let w = ResidualWeights::identity(net.n_residuals());
            let r = assemble_residual(&net, &v, &u).unwrap();
            let g = gradient(&residual_jacobian(&net, &v, &u, &Wrt::Voltage).unwrap(), &r, &w);
            let x = v.to_flat();
            let h = 1e-6;
            for col in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[col] += h;
                xm[col] -= h;
                let fp = rho(&assemble_residual(&net, &VoltageState::from_flat(&xp, 9), &u).unwrap());
                let fm = rho(&assemble_residual(&net, &VoltageState::from_flat(&xm, 9), &u).unwrap());
                prop_assert!(rel_close((fp - fm) / (2.0 * h), g[col], 1e-6));
            }
        }

        #[test]
        fn rho_vanishes_exactly_with_residual(values in prop::collection::vec(-1e-3..1e-3f64, 19)) {
            let r = ResidualVector { values };
            let zero = r.values.iter().all(|&x| x == 0.0);
            prop_assert_eq!(rho(&r) == 0.0, zero);
        }

        #[test]
        fn oracle_agrees_with_kcl_on_kvl_consistent_states(seed in prop::collection::vec(-1.0..1.0f64, 6), ref_bus in 0usize..9) {
            let net = case9();
            let v = kvl_consistent_state(&net, &seed);
            let u = net.nominal_controls();
            let r = assemble_residual(&net, &v, &u).unwrap();
            let theta = reconstruct_bus_angles(&net, &v, ref_bus).unwrap();
            let mism = ybus_oracle_mismatch(&net, &v, &u, ref_bus).unwrap();
            for n in 0..9 {
                let local = mism[n] * Complex64::from_polar(1.0, -theta[n]);
                prop_assert!((local - r.kcl(9, n)).norm() <= 1e-10);
            }
        }

        #[test]
        fn flipping_a_branch_preserves_residuals(seed in prop::collection::vec(-1.0..1.0f64, 5), k in 0usize..3) {
            let net = triangle();
            let v = perturbed_state(&net, &seed);
            let u = net.nominal_controls();
            let r = assemble_residual(&net, &v, &u).unwrap();

            let mut branches = net.branches.clone();
            branches[k] = branches[k].reversed();
            let flipped = Network::from_parts(net.base_mva, net.buses.clone(), branches, net.loads.clone(), net.generators.clone()).unwrap();
            let mut v2 = v.clone();
            v2.branch_angles[k] = -v2.branch_angles[k];
            let r2 = assemble_residual(&flipped, &v2, &u).unwrap();
            for (a, b) in r.values.iter().zip(&r2.values) {
                prop_assert!((a.abs() - b.abs()).abs() <= 1e-14);
            }
            prop_assert!((rho(&r) - rho(&r2)).abs() <= 1e-15 * rho(&r).max(1.0));
        }
    }
}
