//! Neural solvers `v̂ = Φ̂_θ(u) = A_θ φ(u)`.
//!
//! Inputs and targets are standardised with training-set statistics; the
//! regressor works entirely in normalised coordinates and [`NeuralSolver`]
//! maps back to physical units. Two feature maps are available: linear
//! (`[1, ũ]`, fitted in closed form by [`fit_linear`]) and a two-layer tanh
//! MLP trained by full-batch L-BFGS ([`train`]).

mod bim;
mod model;
mod optim;
mod train;

pub use bim::{bim_transform, nonzero_residual_count, BimData, BimEncoding, BusKind};
pub use model::{FeatureKind, Mlp, Normalizer, Regressor, SCALE_FLOOR};
pub use optim::{strong_wolfe, Adam, Lbfgs, LineSearchResult};
pub use train::{fit_linear, train, LinearFitReport, OptimizerKind, TrainConfig, TrainReport};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::residual::{assemble_residual, full_control_jacobian, residual_jacobian, rho, ResidualVector, Wrt};
use crate::state::{ControlVector, VoltageState};

/// A trained map from controls to voltages in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSolver {
    pub regressor: Regressor,
    pub normalizer: Normalizer,
    /// Number of leading outputs that are voltage magnitudes.
    pub n_buses: usize,
}

/// A prediction, flagged when it leaves the voltage domain. Out-of-domain
/// values are returned unchanged, never clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub v: VoltageState,
    pub in_domain: bool,
}

impl NeuralSolver {
    pub fn kind(&self) -> FeatureKind {
        self.regressor.kind
    }

    pub fn n_inputs(&self) -> usize {
        self.normalizer.n_inputs()
    }

    pub fn n_outputs(&self) -> usize {
        self.normalizer.n_outputs()
    }

    /// Features of the normalised input.
    pub fn features(&self, u: &[f64]) -> DVector<f64> {
        self.regressor.features(&self.normalizer.normalize_input(u))
    }

    /// Raw output vector in physical units.
    pub fn predict_flat(&self, u: &[f64]) -> DVector<f64> {
        let x = self.normalizer.normalize_input(u);
        self.normalizer.denormalize_output(&self.regressor.forward(&x))
    }

    pub fn predict(&self, u: &ControlVector) -> Prediction {
        let v = VoltageState::from_flat(self.predict_flat(&u.entries).as_slice(), self.n_buses);
        Prediction {
            in_domain: v.in_domain(),
            v,
        }
    }

    /// `∂v̂/∂u` in physical units (`d × m`).
    pub fn output_jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let x = self.normalizer.normalize_input(u);
        let mut jac = self.regressor.input_jacobian(&x);
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= self.normalizer.out_scale[i];
        }
        for (j, mut col) in jac.column_iter_mut().enumerate() {
            col /= self.normalizer.in_scale[j];
        }
        jac
    }

    /// Mean squared error in normalised target space over `(inputs, targets)` rows.
    pub fn normalized_loss(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
        let x = self.normalizer.normalize_inputs(inputs);
        let y = self.normalizer.normalize_targets(targets);
        self.regressor.loss(&x, &y)
    }
}

/// Anything that maps controls to a voltage state with a known sensitivity.
pub trait PowerFlowModel {
    fn predict_voltage(&self, u: &ControlVector) -> Result<VoltageState>;

    /// `∂v/∂u`, shape `(|N|+|B|) × m`.
    fn voltage_jacobian(&self, u: &ControlVector) -> Result<DMatrix<f64>>;
}

impl PowerFlowModel for NeuralSolver {
    fn predict_voltage(&self, u: &ControlVector) -> Result<VoltageState> {
        Ok(self.predict(u).v)
    }

    fn voltage_jacobian(&self, u: &ControlVector) -> Result<DMatrix<f64>> {
        Ok(self.output_jacobian(&u.entries))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedResidual {
    pub v_hat: VoltageState,
    pub residual: ResidualVector,
    pub rho: f64,
    /// `dρ̂/du` restricted to the requested indices.
    pub grad: DVector<f64>,
}

/// `ρ̂(u) = ρ(Φ(u), u)` and its total derivative with respect to the
/// control entries in `indices`: `rᵀ (J_v ∂Φ/∂u + J_u)`.
pub fn predict_residual_and_grad<M: PowerFlowModel + ?Sized>(
    model: &M,
    network: &Network,
    u: &ControlVector,
    indices: &[usize],
) -> Result<PredictedResidual> {
    let v_hat = model.predict_voltage(u)?;
    let residual = assemble_residual(network, &v_hat, u)?;
    let r = residual.as_dvector();
    let jv = residual_jacobian(network, &v_hat, u, &Wrt::Voltage)?;
    let ju = full_control_jacobian(network, &v_hat, u)?;
    let total = jv * model.voltage_jacobian(u)? + ju;
    let full = total.transpose() * r;
    let grad = DVector::from_iterator(indices.len(), indices.iter().map(|&k| full[k]));
    Ok(PredictedResidual {
        rho: rho(&residual),
        v_hat,
        residual,
        grad,
    })
}

/// Which variables a model maps between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// Controls to voltage magnitudes and branch angles.
    #[default]
    Rpf,
    /// Bus-type inputs to bus angles and PQ magnitudes, see [`BimEncoding`].
    Bim,
}

/// Serialised form of a [`NeuralSolver`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub formulation: Formulation,
    pub kind: FeatureKind,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub n_buses: usize,
    pub hidden: Option<[usize; 2]>,
    pub params: Vec<f64>,
    pub normalizer: Normalizer,
    pub train_config: Option<TrainConfig>,
    pub dataset_fingerprint: Option<String>,
    pub network_fingerprint: Option<String>,
}

const CHECKPOINT_FORMAT: &str = "rpf-model/1";

impl Checkpoint {
    pub fn new(solver: &NeuralSolver) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            formulation: Formulation::Rpf,
            kind: solver.kind(),
            n_inputs: solver.n_inputs(),
            n_outputs: solver.n_outputs(),
            n_buses: solver.n_buses,
            hidden: solver.regressor.mlp.as_ref().map(Mlp::hidden),
            params: solver.regressor.params(),
            normalizer: solver.normalizer.clone(),
            train_config: None,
            dataset_fingerprint: None,
            network_fingerprint: None,
        }
    }

    pub fn to_solver(&self) -> Result<NeuralSolver> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", self.format)));
        }
        let hidden = self.hidden.unwrap_or([0, 0]);
        if self.kind == FeatureKind::Mlp && self.hidden.is_none() {
            return Err(Error::Format("MLP checkpoint lacks hidden widths".into()));
        }
        let mut regressor = Regressor::new(self.kind, self.n_inputs, self.n_outputs, hidden, 0);
        if regressor.n_params() != self.params.len()
            || self.normalizer.n_inputs() != self.n_inputs
            || self.normalizer.n_outputs() != self.n_outputs
        {
            return Err(Error::Format("checkpoint shapes are inconsistent".into()));
        }
        regressor.set_params(&self.params);
        Ok(NeuralSolver {
            regressor,
            normalizer: self.normalizer.clone(),
            n_buses: self.n_buses,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::case9;

    fn untrained(kind: FeatureKind) -> NeuralSolver {
        let net = case9();
        let mut nrm = Normalizer::identity(net.n_controls(), net.n_voltage_vars());
        nrm.out_mean = VoltageState::flat(9, 9).to_flat();
        nrm.out_mean[12] = 0.05;
        NeuralSolver {
            regressor: Regressor::new(kind, net.n_controls(), net.n_voltage_vars(), [8, 8], 4),
            normalizer: nrm,
            n_buses: 9,
        }
    }

    #[test]
    fn untrained_solver_predicts_target_mean() {
        let s = untrained(FeatureKind::Mlp);
        let p = s.predict(&case9().nominal_controls());
        assert_eq!(p.v.to_flat(), s.normalizer.out_mean);
        assert!(p.in_domain);
    }

    #[test]
    fn out_of_domain_predictions_are_flagged_not_clipped() {
        let mut s = untrained(FeatureKind::Linear);
        s.normalizer.out_mean[10] = 2.0;
        let p = s.predict(&case9().nominal_controls());
        assert!(!p.in_domain);
        assert_eq!(p.v.branch_angles[1], 2.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = untrained(FeatureKind::Mlp);
        let ck = Checkpoint::new(&s);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().to_solver().unwrap();
        assert_eq!(back, s);
        let mut bad = ck.clone();
        bad.params.pop();
        assert!(bad.to_solver().is_err());
    }
}
