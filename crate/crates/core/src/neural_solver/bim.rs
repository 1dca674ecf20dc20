//! Bus-injection-model (BIM) representation for baseline comparisons.
//!
//! A conventional power-flow learner sees bus types: the slack bus supplies
//! `(θ_ref, V)`, PV buses supply `(P, V)`, PQ buses supply `(P, Q)`, and the
//! model predicts `θ` at every non-slack bus plus `V` at PQ buses. After the
//! prediction, slack active power and the reactive power of the slack and PV
//! generators are recomputed so that their own balance equations hold, which
//! makes those residuals zero by construction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::injectors::{generator_current, GeneratorControl};
use crate::network::Network;
use crate::residual::{bus_currents, injector_currents, reconstruct_bus_angles};
use crate::state::{ControlVector, VoltageState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimEncoding {
    pub bus_types: Vec<BusKind>,
    pub slack: usize,
    /// Generator index at each slack/PV bus.
    generator_at: Vec<Option<usize>>,
}

/// Inputs (`n × p`) and targets (`n × q`) of a BIM-encoded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BimData {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl BimEncoding {
    /// Bus types from the case's type column: 3 is slack, 2 is PV, others PQ.
    pub fn from_network(network: &Network) -> Result<Self> {
        let bus_types: Vec<BusKind> = network
            .buses
            .iter()
            .map(|b| match b.bus_type {
                3 => BusKind::Slack,
                2 => BusKind::Pv,
                _ => BusKind::Pq,
            })
            .collect();
        let slacks: Vec<usize> = (0..bus_types.len()).filter(|&k| bus_types[k] == BusKind::Slack).collect();
        if slacks.len() != 1 {
            return Err(Error::Validation(format!("BIM needs exactly one slack bus, found {}", slacks.len())));
        }
        let mut generator_at = vec![None; bus_types.len()];
        for (k, kind) in bus_types.iter().enumerate() {
            if *kind == BusKind::Pq {
                continue;
            }
            let gens: Vec<usize> = (0..network.generators.len())
                .filter(|&j| network.generators[j].bus == k)
                .collect();
            if gens.len() != 1 {
                return Err(Error::Validation(format!(
                    "bus {} is {:?} but has {} generators; exactly one is required",
                    network.buses[k].id,
                    kind,
                    gens.len()
                )));
            }
            generator_at[k] = Some(gens[0]);
        }
        Ok(Self {
            bus_types,
            slack: slacks[0],
            generator_at,
        })
    }

    pub fn n_pv(&self) -> usize {
        self.bus_types.iter().filter(|k| **k == BusKind::Pv).count()
    }

    pub fn input_labels(&self, network: &Network) -> Vec<String> {
        let mut labels = Vec::new();
        for (b, kind) in network.buses.iter().zip(&self.bus_types) {
            let (a, c) = match kind {
                BusKind::Slack => ("theta", "V"),
                BusKind::Pv => ("P", "V"),
                BusKind::Pq => ("P", "Q"),
            };
            labels.push(format!("{a}{}", b.id));
            labels.push(format!("{c}{}", b.id));
        }
        labels
    }

    pub fn target_labels(&self, network: &Network) -> Vec<String> {
        let mut labels: Vec<String> = network
            .buses
            .iter()
            .filter(|b| b.index != self.slack)
            .map(|b| format!("theta{}", b.id))
            .collect();
        labels.extend(
            network
                .buses
                .iter()
                .filter(|b| self.bus_types[b.index] == BusKind::Pq)
                .map(|b| format!("V{}", b.id)),
        );
        labels
    }

    /// `(inputs, targets)` of a state whose branch angles satisfy the voltage law.
    pub fn encode(&self, network: &Network, v: &VoltageState, u: &ControlVector) -> Result<(Vec<f64>, Vec<f64>)> {
        let theta = reconstruct_bus_angles(network, v, self.slack)?;
        let inj = injector_currents(network, v, u)?;
        let mut inputs = Vec::with_capacity(2 * network.n_buses());
        for (k, kind) in self.bus_types.iter().enumerate() {
            let vm = v.magnitudes[k];
            let s = vm * inj[k].conj();
            match kind {
                BusKind::Slack => inputs.extend([theta[k], vm]),
                BusKind::Pv => inputs.extend([s.re, vm]),
                BusKind::Pq => inputs.extend([s.re, s.im]),
            }
        }
        let mut targets: Vec<f64> = (0..network.n_buses()).filter(|&k| k != self.slack).map(|k| theta[k]).collect();
        targets.extend(
            (0..network.n_buses())
                .filter(|&k| self.bus_types[k] == BusKind::Pq)
                .map(|k| v.magnitudes[k]),
        );
        Ok((inputs, targets))
    }

    /// Maps a BIM input/target pair back to RPF variables. Loads and PV
    /// active powers are taken from `u`; the slack generator's `P_M` and the
    /// slack/PV generators' `V_ref` are recomputed so that their buses'
    /// balance equations hold.
    pub fn decode(
        &self,
        network: &Network,
        inputs: &[f64],
        targets: &[f64],
        u: &ControlVector,
    ) -> Result<(VoltageState, ControlVector)> {
        let n = network.n_buses();
        let mut theta = vec![0.0; n];
        let mut vm = vec![0.0; n];
        let mut t = targets.iter();
        for k in (0..n).filter(|&k| k != self.slack) {
            theta[k] = *t.next().ok_or_else(|| Error::Validation("too few BIM targets".into()))?;
        }
        for k in 0..n {
            match self.bus_types[k] {
                BusKind::Slack => {
                    theta[k] = inputs[2 * k];
                    vm[k] = inputs[2 * k + 1];
                }
                BusKind::Pv => vm[k] = inputs[2 * k + 1],
                BusKind::Pq => {
                    vm[k] = *t.next().ok_or_else(|| Error::Validation("too few BIM targets".into()))?;
                }
            }
        }
        let v = VoltageState {
            magnitudes: vm,
            branch_angles: network.branches.iter().map(|b| theta[b.from] - theta[b.to]).collect(),
        };

        let mut u_adj = u.clone();
        let layout = network.layout();
        let currents = bus_currents(network, &v, u)?;
        for (k, &gen) in self.generator_at.iter().enumerate() {
            let Some(j) = gen else { continue };
            let g = &network.generators[j];
            let ctrl = GeneratorControl {
                p_m: u[layout.gen_pm(j)],
                v_ref: u[layout.gen_vref(j)],
            };
            let rest: Complex64 = currents[k] - generator_current(ctrl, g.params, v.magnitudes[k])?;
            u_adj[layout.gen_vref(j)] = v.magnitudes[k] + rest.im / g.params.k_v;
            if self.bus_types[k] == BusKind::Slack {
                u_adj[layout.gen_pm(j)] = -v.magnitudes[k] * rest.re;
            }
        }
        Ok((v, u_adj))
    }

    /// Residual entries that are zero by construction after [`Self::decode`]:
    /// both current-law parts at the slack bus, the imaginary part at PV
    /// buses, and every voltage-law entry.
    pub fn structural_zero_mask(&self, network: &Network) -> Vec<bool> {
        let n = network.n_buses();
        let mut mask = vec![false; network.n_residuals()];
        mask[self.slack] = true;
        for k in 0..n {
            if self.bus_types[k] != BusKind::Pq {
                mask[n + k] = true;
            }
        }
        for l in 0..network.n_cycles() {
            mask[2 * n + l] = true;
        }
        mask
    }
}

/// Number of residual entries a BIM prediction can get wrong:
/// `2|N| + |C| − (#PV + 2 + |C|)`.
pub fn nonzero_residual_count(network: &Network, enc: &BimEncoding) -> usize {
    network.n_residuals() - (enc.n_pv() + 2 + network.n_cycles())
}

pub fn bim_transform(dataset: &Dataset, network: &Network, enc: &BimEncoding) -> Result<BimData> {
    let mut inputs = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let (x, y) = enc.encode(network, &r.v_star, &r.u)?;
        inputs.push(x);
        targets.push(y);
    }
    let p = 2 * network.n_buses();
    let q = network.n_buses() - 1 + enc.bus_types.iter().filter(|k| **k == BusKind::Pq).count();
    Ok(BimData {
        inputs: DMatrix::from_fn(inputs.len(), p, |i, j| inputs[i][j]),
        targets: DMatrix::from_fn(targets.len(), q, |i, j| targets[i][j]),
    })
}
