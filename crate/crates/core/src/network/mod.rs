//! Grid graph: buses, Π-model branches, injector attachments and the cycle
//! basis that the KVL residuals run over.

mod cycles;
mod matpower;

use std::collections::HashMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cycles::{cycle_scaling, fundamental_cycles, SpanningTree};
pub use matpower::{parse_matpower_case, write_matpower_case};

use crate::error::{Error, Result};
use crate::injectors::GeneratorParams;
use crate::state::{ControlLayout, ControlVector};

/// Raw `bus` row (MATPOWER units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRow {
    pub bus_i: usize,
    #[serde(default = "default_bus_type")]
    pub bus_type: i32,
    #[serde(default)]
    pub gs: f64,
    #[serde(default)]
    pub bs: f64,
    #[serde(default = "one")]
    pub vm: f64,
    #[serde(default)]
    pub va: f64,
    #[serde(default)]
    pub base_kv: f64,
    #[serde(default = "default_vmax")]
    pub vmax: f64,
    #[serde(default = "default_vmin")]
    pub vmin: f64,
}

/// Constant-power load in MW / MVAr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRow {
    pub bus: usize,
    pub pd: f64,
    pub qd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub bus: usize,
    pub pg: f64,
    #[serde(default)]
    pub qg: f64,
    #[serde(default)]
    pub qmax: f64,
    #[serde(default)]
    pub qmin: f64,
    #[serde(default = "one")]
    pub vg: f64,
    #[serde(default)]
    pub mbase: f64,
    #[serde(default = "one_i")]
    pub status: i32,
    pub pmax: f64,
    #[serde(default)]
    pub pmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub f_bus: usize,
    pub t_bus: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub rate_a: f64,
    #[serde(default)]
    pub ratio: f64,
    #[serde(default)]
    pub angle: f64,
    #[serde(default = "one_i")]
    pub status: i32,
}

fn one() -> f64 {
    1.0
}
fn one_i() -> i32 {
    1
}
fn default_bus_type() -> i32 {
    1
}
fn default_vmax() -> f64 {
    1.1
}
fn default_vmin() -> f64 {
    0.9
}

/// Parsed but unvalidated case tables. Also the `network.json` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub base_mva: f64,
    pub buses: Vec<BusRow>,
    pub branches: Vec<BranchRow>,
    #[serde(default)]
    pub loads: Vec<LoadRow>,
    #[serde(default)]
    pub generators: Vec<GenRow>,
    #[serde(default)]
    pub gencost: Vec<Vec<f64>>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-generator parameters that MATPOWER has no column for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectorConfig {
    pub generators: Vec<GeneratorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub bus: usize,
    pub k_v: f64,
    pub p_rated: f64,
}

impl InjectorConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Voltage-support gains 130, 21 and 13 at buses 1-3, rated power equal
    /// to each unit's Pmax.
    pub fn case9() -> Self {
        Self {
            generators: vec![
                GeneratorEntry { bus: 1, k_v: 130.0, p_rated: 2.5 },
                GeneratorEntry { bus: 2, k_v: 21.0, p_rated: 3.0 },
                GeneratorEntry { bus: 3, k_v: 13.0, p_rated: 2.7 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub index: usize,
    pub id: usize,
    pub name: String,
    pub base_kv: f64,
    pub bus_type: i32,
    /// Shunt admittance `Gs + jBs` in per-unit.
    pub shunt: Complex64,
    pub vmin: f64,
    pub vmax: f64,
}

/// Π-model branch. `y_*` blocks follow the MATPOWER convention: the current
/// leaving bus f into the branch is `y_ff V_f + y_ft V_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_c: f64,
    pub tap: f64,
    pub shift: f64,
    /// Thermal rating converted to a per-unit current limit, if any.
    pub current_limit: Option<f64>,
    pub y_ff: Complex64,
    pub y_ft: Complex64,
    pub y_tf: Complex64,
    pub y_tt: Complex64,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        from: usize,
        to: usize,
        r: f64,
        x: f64,
        b_c: f64,
        tap: f64,
        current_limit: Option<f64>,
    ) -> Self {
        Self::with_shift(id, from, to, r, x, b_c, tap, 0.0, current_limit)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_shift(
        id: usize,
        from: usize,
        to: usize,
        r: f64,
        x: f64,
        b_c: f64,
        tap: f64,
        shift: f64,
        current_limit: Option<f64>,
    ) -> Self {
        let tap = if tap == 0.0 { 1.0 } else { tap };
        let ys = Complex64::new(r, x).inv();
        let ratio = Complex64::from_polar(tap, shift);
        let ytt = ys + Complex64::new(0.0, b_c / 2.0);
        Self {
            id,
            from,
            to,
            r,
            x,
            b_c,
            tap,
            shift,
            current_limit,
            y_ff: ytt / (ratio * ratio.conj()),
            y_ft: -ys / ratio.conj(),
            y_tf: -ys / ratio,
            y_tt: ytt,
        }
    }

    pub fn other_end(&self, bus: usize) -> usize {
        if bus == self.from {
            self.to
        } else {
            self.from
        }
    }

    /// Same physical two-port stored with the opposite orientation.
    pub fn reversed(&self) -> Self {
        Self {
            from: self.to,
            to: self.from,
            y_ff: self.y_tt,
            y_ft: self.y_tf,
            y_tf: self.y_ft,
            y_tt: self.y_ff,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub id: usize,
    pub branch_ids: Vec<usize>,
    /// +1 where the walk traverses the branch from → to, -1 otherwise.
    pub orientations: Vec<i8>,
    pub y_scale: f64,
}

impl Cycle {
    pub fn is_closed(&self, branches: &[Branch]) -> bool {
        let Some(&first) = self.branch_ids.first() else {
            return true;
        };
        let start = if self.orientations[0] > 0 {
            branches[first].from
        } else {
            branches[first].to
        };
        let mut at = start;
        for (&k, &o) in self.branch_ids.iter().zip(&self.orientations) {
            let br = &branches[k];
            let (tail, head) = if o > 0 { (br.from, br.to) } else { (br.to, br.from) };
            if tail != at {
                return false;
            }
            at = head;
        }
        at == start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p: f64,
    pub v_ref: f64,
    pub p_max: f64,
    pub p_min: f64,
    pub params: GeneratorParams,
    /// Polynomial cost coefficients, highest order first, in $/h of MW.
    pub cost: Option<Vec<f64>>,
}

/// Validated, per-unit network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub generators: Vec<Generator>,
    pub cycles: Vec<Cycle>,
    tree: SpanningTree,
    layout: ControlLayout,
}

impl Network {
    /// Assembles a network from loose parts. Used by [`build_network`] and
    /// by tests that need hand-made grids.
    pub fn from_parts(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        loads: Vec<Load>,
        generators: Vec<Generator>,
    ) -> Result<Self> {
        let n = buses.len();
        for br in &branches {
            if br.from >= n || br.to >= n {
                return Err(Error::Validation(format!("branch {} references an unknown bus", br.id)));
            }
            if br.from == br.to {
                return Err(Error::Validation(format!("branch {} is a self-loop", br.id)));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::Validation(format!("branch {} has zero series impedance", br.id)));
            }
        }
        for (k, br) in branches.iter().enumerate() {
            if br.id != k {
                return Err(Error::Validation("branch ids must be contiguous".into()));
            }
        }
        if loads.iter().any(|l| l.bus >= n) || generators.iter().any(|g| g.bus >= n) {
            return Err(Error::Validation("injector attached to an unknown bus".into()));
        }
        for g in &generators {
            g.params.validate()?;
            if g.v_ref <= 0.0 {
                return Err(Error::Validation("generator voltage reference must be positive".into()));
            }
        }
        let tree = SpanningTree::build(n, &branches)?;
        let cycles = fundamental_cycles(&tree, &branches)?;
        debug_assert_eq!(cycles.len() + n, branches.len() + 1);
        let layout = ControlLayout::new(loads.len(), generators.len());
        Ok(Self {
            base_mva,
            buses,
            branches,
            loads,
            generators,
            cycles,
            tree,
            layout,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn n_cycles(&self) -> usize {
        self.cycles.len()
    }

    /// Length of the voltage vector: one magnitude per bus, one angle per branch.
    pub fn n_voltage_vars(&self) -> usize {
        self.n_buses() + self.n_branches()
    }

    /// Length of the residual vector: 2|N| + |C|.
    pub fn n_residuals(&self) -> usize {
        2 * self.n_buses() + self.n_cycles()
    }

    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }

    pub fn layout(&self) -> &ControlLayout {
        &self.layout
    }

    pub fn n_controls(&self) -> usize {
        self.layout.len()
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Setpoints taken from the case file (loads, Pg, Vg).
    pub fn nominal_controls(&self) -> ControlVector {
        let mut u = vec![0.0; self.n_controls()];
        for (i, l) in self.loads.iter().enumerate() {
            u[self.layout.load_p(i)] = l.p;
            u[self.layout.load_q(i)] = l.q;
        }
        for (j, g) in self.generators.iter().enumerate() {
            u[self.layout.gen_pm(j)] = g.p;
            u[self.layout.gen_vref(j)] = g.v_ref;
        }
        ControlVector::new(u)
    }

    /// Human-readable label for each control entry, e.g. `P_load5`, `Vref_gen1`.
    pub fn control_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.n_controls());
        for l in &self.loads {
            let id = self.buses[l.bus].id;
            labels.push(format!("P_load{id}"));
            labels.push(format!("Q_load{id}"));
        }
        for g in &self.generators {
            let id = self.buses[g.bus].id;
            labels.push(format!("PM_gen{id}"));
            labels.push(format!("Vref_gen{id}"));
        }
        labels
    }

    pub fn voltage_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.buses.iter().map(|b| format!("V{}", b.id)).collect();
        for br in &self.branches {
            labels.push(format!("phi{}_{}", self.buses[br.from].id, self.buses[br.to].id));
        }
        labels
    }

    pub fn residual_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.buses.iter().map(|b| format!("ReKCL{}", b.id)).collect();
        labels.extend(self.buses.iter().map(|b| format!("ImKCL{}", b.id)));
        labels.extend(self.cycles.iter().map(|c| format!("KVL{}", c.id + 1)));
        labels
    }

    /// SHA-256 over every parameter that affects residuals.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |x: f64| h.update(x.to_le_bytes());
        put(self.base_mva);
        for b in &self.buses {
            put(b.id as f64);
            put(b.shunt.re);
            put(b.shunt.im);
        }
        for br in &self.branches {
            for v in [br.from as f64, br.to as f64, br.r, br.x, br.b_c, br.tap, br.shift] {
                put(v);
            }
        }
        for l in &self.loads {
            put(l.bus as f64);
        }
        for g in &self.generators {
            put(g.bus as f64);
            put(g.params.k_v);
            put(g.params.p_rated);
        }
        hex::encode(h.finalize())
    }
}

/// Validates a parsed case and converts it to per-unit.
pub fn build_network(spec: &NetworkSpec, injectors: &InjectorConfig) -> Result<Network> {
    if !(spec.base_mva > 0.0) {
        return Err(Error::Validation("baseMVA must be positive".into()));
    }
    let base = spec.base_mva;
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut buses = Vec::with_capacity(spec.buses.len());
    for row in &spec.buses {
        if index.insert(row.bus_i, buses.len()).is_some() {
            return Err(Error::Validation(format!("duplicate bus id {}", row.bus_i)));
        }
        buses.push(Bus {
            index: buses.len(),
            id: row.bus_i,
            name: format!("bus{}", row.bus_i),
            base_kv: row.base_kv,
            bus_type: row.bus_type,
            shunt: Complex64::new(row.gs, row.bs) / base,
            vmin: row.vmin,
            vmax: row.vmax,
        });
    }
    let lookup = |id: usize| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown bus id {id}")))
    };

    let mut branches = Vec::new();
    for row in spec.branches.iter().filter(|r| r.status != 0) {
        let (from, to) = (lookup(row.f_bus)?, lookup(row.t_bus)?);
        let limit = (row.rate_a > 0.0).then(|| row.rate_a / base);
        branches.push(Branch::with_shift(
            branches.len(),
            from,
            to,
            row.r,
            row.x,
            row.b,
            row.ratio,
            row.angle.to_radians(),
            limit,
        ));
    }

    let mut loads = Vec::new();
    for row in spec.loads.iter().filter(|l| l.pd != 0.0 || l.qd != 0.0) {
        loads.push(Load {
            bus: lookup(row.bus)?,
            p: row.pd / base,
            q: row.qd / base,
        });
    }
    loads.sort_by_key(|l| l.bus);

    let mut used = vec![false; injectors.generators.len()];
    let mut generators = Vec::new();
    for (k, row) in spec.generators.iter().enumerate() {
        if row.status <= 0 {
            continue;
        }
        let slot = injectors
            .generators
            .iter()
            .enumerate()
            .position(|(i, e)| e.bus == row.bus && !used[i])
            .ok_or_else(|| {
                Error::Validation(format!("no injector parameters for generator at bus {}", row.bus))
            })?;
        used[slot] = true;
        let entry = &injectors.generators[slot];
        let cost = spec
            .gencost
            .get(k)
            .filter(|c| c.len() >= 4 && c[0] == 2.0)
            .map(|c| c[4..].to_vec());
        generators.push(Generator {
            bus: lookup(row.bus)?,
            p: row.pg / base,
            v_ref: row.vg,
            p_max: row.pmax / base,
            p_min: row.pmin / base,
            params: GeneratorParams {
                k_v: entry.k_v,
                p_rated: entry.p_rated,
            },
            cost,
        });
    }

    Network::from_parts(base, buses, branches, loads, generators)
}

/// Recomputes the fundamental cycle basis of a built network.
pub fn cycle_basis(network: &Network) -> Result<Vec<Cycle>> {
    fundamental_cycles(network.tree(), &network.branches)
}

/// The IEEE 9-bus case shipped with the crate.
pub fn case9() -> Network {
    let spec = parse_matpower_case(CASE9_M).expect("bundled case9 parses");
    build_network(&spec, &InjectorConfig::case9()).expect("bundled case9 builds")
}

pub const CASE9_M: &str = include_str!("../../data/case9.m");

#[cfg(test)]
mod tests {
    use super::*;

    fn bus_row(id: usize) -> BusRow {
        BusRow {
            bus_i: id,
            bus_type: 1,
            gs: 0.0,
            bs: 0.0,
            vm: 1.0,
            va: 0.0,
            base_kv: 345.0,
            vmax: 1.1,
            vmin: 0.9,
        }
    }

    fn branch_row(f: usize, t: usize) -> BranchRow {
        BranchRow {
            f_bus: f,
            t_bus: t,
            r: 0.0,
            x: 0.1,
            b: 0.0,
            rate_a: 0.0,
            ratio: 0.0,
            angle: 0.0,
            status: 1,
        }
    }

    fn two_bus_spec() -> NetworkSpec {
        NetworkSpec {
            base_mva: 100.0,
            buses: vec![bus_row(1), bus_row(2)],
            branches: vec![branch_row(1, 2)],
            loads: vec![],
            generators: vec![],
            gencost: vec![],
            warnings: vec![],
        }
    }

    #[test]
    fn case9_structure() {
        let net = case9();
        assert_eq!(net.n_buses(), 9);
        assert_eq!(net.n_branches(), 9);
        assert_eq!(net.n_cycles(), 1);
        assert_eq!(net.loads.len(), 3);
        assert_eq!(net.generators.len(), 3);
        assert_eq!(net.n_controls(), 12);
        assert_eq!(net.generators[0].params.k_v, 130.0);
        assert!((net.loads[2].p - 1.25).abs() < 1e-15);
    }

    #[test]
    fn case9_cycle_is_the_ring() {
        let net = case9();
        let cycle = &net.cycles[0];
        let mut ring: Vec<(usize, usize)> = cycle
            .branch_ids
            .iter()
            .map(|&k| {
                let br = &net.branches[k];
                let (a, b) = (net.buses[br.from].id, net.buses[br.to].id);
                (a.min(b), a.max(b))
            })
            .collect();
        ring.sort_unstable();
        assert_eq!(ring, vec![(4, 5), (4, 9), (5, 6), (6, 7), (7, 8), (8, 9)]);
        assert!(cycle.is_closed(&net.branches));
        // generating branch first
        assert_eq!(cycle.branch_ids[0], 5);
        let z: Complex64 = cycle
            .branch_ids
            .iter()
            .map(|&k| Complex64::new(net.branches[k].r, net.branches[k].x))
            .sum();
        assert_eq!(cycle.y_scale, z.inv().im);
    }

    #[test]
    fn two_bus_has_no_cycles() {
        let net = build_network(&two_bus_spec(), &InjectorConfig { generators: vec![] }).unwrap();
        assert_eq!(net.n_cycles(), 0);
    }

    #[test]
    fn self_loop_rejected() {
        let mut spec = two_bus_spec();
        spec.branches.push(branch_row(1, 1));
        let err = build_network(&spec, &InjectorConfig { generators: vec![] });
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_bus_rejected() {
        let mut spec = two_bus_spec();
        spec.buses.push(bus_row(2));
        assert!(matches!(
            build_network(&spec, &InjectorConfig { generators: vec![] }),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_impedance_rejected() {
        let mut spec = two_bus_spec();
        spec.branches[0].x = 0.0;
        assert!(matches!(
            build_network(&spec, &InjectorConfig { generators: vec![] }),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn disconnected_rejected() {
        let mut spec = two_bus_spec();
        spec.buses.push(bus_row(3));
        assert!(matches!(
            build_network(&spec, &InjectorConfig { generators: vec![] }),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn shunts_are_kept_in_per_unit() {
        let mut spec = two_bus_spec();
        spec.buses[1].bs = 19.0;
        let net = build_network(&spec, &InjectorConfig { generators: vec![] }).unwrap();
        assert_eq!(net.buses[1].shunt, Complex64::new(0.0, 0.19));
    }

    #[test]
    fn pi_model_symmetry_without_tap() {
        for br in &case9().branches {
            assert_eq!(br.y_ft, br.y_tf);
            assert_eq!(br.y_ff, br.y_tt);
        }
        let tapped = Branch::new(0, 0, 1, 0.01, 0.1, 0.02, 0.95, None);
        assert_eq!(tapped.y_ft, tapped.y_tf);
        assert!((tapped.y_ff - tapped.y_tt / (0.95 * 0.95)).norm() < 1e-12);
    }

    #[test]
    fn json_schema_round_trip() {
        let spec = parse_matpower_case(CASE9_M).unwrap();
        let again = NetworkSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn missing_injector_parameters() {
        let spec = parse_matpower_case(CASE9_M).unwrap();
        let mut cfg = InjectorConfig::case9();
        cfg.generators.pop();
        assert!(matches!(build_network(&spec, &cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn fingerprint_sensitive_to_parameters() {
        let spec = parse_matpower_case(CASE9_M).unwrap();
        let a = build_network(&spec, &InjectorConfig::case9()).unwrap();
        let mut cfg = InjectorConfig::case9();
        cfg.generators[1].k_v = 22.0;
        let b = build_network(&spec, &cfg).unwrap();
        assert_eq!(a.fingerprint(), case9().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
