//! Decision vectors shared by every stage: voltages `v` and controls `u`.

use serde::{Deserialize, Serialize};

/// Voltage magnitudes per bus plus one angle difference per branch.
///
/// The branch angle is `θ_from − θ_to`, so it is positive when the from-end
/// leads, which is the direction active power flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub magnitudes: Vec<f64>,
    pub branch_angles: Vec<f64>,
}

impl VoltageState {
    /// All magnitudes 1.0 pu, all branch angles zero.
    pub fn flat(n_buses: usize, n_branches: usize) -> Self {
        Self {
            magnitudes: vec![1.0; n_buses],
            branch_angles: vec![0.0; n_branches],
        }
    }

    pub fn len(&self) -> usize {
        self.magnitudes.len() + self.branch_angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[V_1 … V_N, φ_1 … φ_B]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.magnitudes.clone();
        out.extend_from_slice(&self.branch_angles);
        out
    }

    pub fn from_flat(flat: &[f64], n_buses: usize) -> Self {
        Self {
            magnitudes: flat[..n_buses].to_vec(),
            branch_angles: flat[n_buses..].to_vec(),
        }
    }

    /// True when every magnitude is positive and every angle lies in (−π/2, π/2).
    pub fn in_domain(&self) -> bool {
        self.magnitudes.iter().all(|&v| v > 0.0)
            && self
                .branch_angles
                .iter()
                .all(|&a| a.abs() < std::f64::consts::FRAC_PI_2)
    }
}

/// Flat vector of component setpoints in [`ControlLayout`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub entries: Vec<f64>,
}

impl ControlVector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self + t·direction`.
    pub fn shifted(&self, direction: &[f64], t: f64) -> Self {
        Self::new(
            self.entries
                .iter()
                .zip(direction)
                .map(|(u, d)| u + t * d)
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for ControlVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for ControlVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.entries[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlField {
    LoadP,
    LoadQ,
    GenPm,
    GenVref,
}

/// Position map for the control vector: loads first (by bus), `P` then `Q`
/// for each; generators next, `P_M` then `V_ref` for each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlLayout {
    n_loads: usize,
    n_gens: usize,
}

impl ControlLayout {
    pub fn new(n_loads: usize, n_gens: usize) -> Self {
        Self { n_loads, n_gens }
    }

    pub fn len(&self) -> usize {
        2 * (self.n_loads + self.n_gens)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_loads(&self) -> usize {
        self.n_loads
    }

    pub fn n_gens(&self) -> usize {
        self.n_gens
    }

    pub fn load_p(&self, i: usize) -> usize {
        2 * i
    }

    pub fn load_q(&self, i: usize) -> usize {
        2 * i + 1
    }

    pub fn gen_pm(&self, j: usize) -> usize {
        2 * self.n_loads + 2 * j
    }

    pub fn gen_vref(&self, j: usize) -> usize {
        2 * self.n_loads + 2 * j + 1
    }

    /// Inverse of the index functions: `(component index, field)`.
    pub fn locate(&self, index: usize) -> (usize, ControlField) {
        assert!(index < self.len(), "control index out of range");
        if index < 2 * self.n_loads {
            let field = if index.is_multiple_of(2) { ControlField::LoadP } else { ControlField::LoadQ };
            (index / 2, field)
        } else {
            let k = index - 2 * self.n_loads;
            let field = if k.is_multiple_of(2) { ControlField::GenPm } else { ControlField::GenVref };
            (k / 2, field)
        }
    }

    pub fn gen_pm_indices(&self) -> Vec<usize> {
        (0..self.n_gens).map(|j| self.gen_pm(j)).collect()
    }
}
