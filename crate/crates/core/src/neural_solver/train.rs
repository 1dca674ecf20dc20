//! Closed-form fitting of linear solvers and L-BFGS training of MLP solvers.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{FeatureKind, Normalizer, Regressor};
use super::optim::{dot, strong_wolfe, Adam, Lbfgs};
use super::NeuralSolver;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lbfgs,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// One epoch is one optimiser iteration over the full batch.
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub lbfgs_history: usize,
    pub adam_lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 6000,
            optimizer: OptimizerKind::Lbfgs,
            lbfgs_history: 10,
            adam_lr: 1e-3,
            seed: 0,
            val_fraction: 0.1,
            patience: 200,
            hidden: [100, 100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || !(0.0..1.0).contains(&self.val_fraction) || self.hidden.contains(&0) {
            return Err(Error::Validation(
                "training needs max_epochs ≥ 1, val_fraction in [0, 1) and non-empty hidden layers".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Optimiser restarts and fallbacks, in order.
    pub events: Vec<String>,
    pub stop_reason: String,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.get(self.best_epoch).copied().unwrap_or(f64::NAN)
    }
}

/// Deterministic split of `0..n` into (train, validation) indices.
pub(crate) fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

enum Phase {
    Lbfgs { memory: Lbfgs, step_scale: f64, failures: usize },
    Adam(Adam),
}

/// Trains a solver of the given kind on `inputs` (`n × m`) → `targets`
/// (`n × d`), returning the parameters with the best validation loss.
pub fn train(
    kind: FeatureKind,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    n_buses: usize,
    cfg: &TrainConfig,
) -> Result<(NeuralSolver, TrainReport)> {
    cfg.validate()?;
    if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
        return Err(Error::Validation("training needs a non-empty, aligned dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(inputs.nrows(), cfg.val_fraction, cfg.seed);
    let (x_train, y_train) = (rows(inputs, &train_idx), rows(targets, &train_idx));
    let normalizer = Normalizer::fit(&x_train, &y_train)?;
    let xt = normalizer.normalize_inputs(&x_train);
    let yt = normalizer.normalize_targets(&y_train);
    let xv = normalizer.normalize_inputs(&rows(inputs, &val_idx));
    let yv = normalizer.normalize_targets(&rows(targets, &val_idx));

    let mut model = Regressor::new(kind, inputs.ncols(), targets.ncols(), cfg.hidden, cfg.seed);
    let mut work = model.clone();
    let mut objective = |p: &[f64]| {
        work.set_params(p);
        work.loss_and_grad(&xt, &yt)
    };
    let mut val_model = model.clone();
    let mut val_loss = |p: &[f64], train_loss: f64| {
        if val_idx.is_empty() {
            train_loss
        } else {
            val_model.set_params(p);
            val_model.loss(&xv, &yv)
        }
    };

    let mut theta = model.params();
    let (mut f, mut g) = objective(&theta);
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut report = TrainReport {
        epochs: 0,
        best_epoch: 0,
        train_loss: vec![f],
        val_loss: vec![val_loss(&theta, f)],
        events: Vec::new(),
        stop_reason: "max_epochs".into(),
    };
    let mut best = (report.val_loss[0], theta.clone());
    let mut phase = match cfg.optimizer {
        OptimizerKind::Lbfgs => Phase::Lbfgs {
            memory: Lbfgs::new(cfg.lbfgs_history),
            step_scale: 1.0,
            failures: 0,
        },
        OptimizerKind::Adam => Phase::Adam(Adam::new(theta.len(), cfg.adam_lr)),
    };

    for epoch in 1..=cfg.max_epochs {
        if g.iter().all(|x| *x == 0.0) {
            report.stop_reason = "zero gradient".into();
            break;
        }
        let mut switch_to_adam = false;
        match &mut phase {
            Phase::Lbfgs {
                memory,
                step_scale,
                failures,
            } => {
                let mut d = memory.direction(&g);
                if dot(&g, &d) >= 0.0 {
                    memory.reset();
                    d = g.iter().map(|x| -x).collect();
                }
                let gnorm = dot(&g, &g).sqrt();
                let alpha0 = if memory.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 } * *step_scale;
                match strong_wolfe(&mut objective, &theta, f, &g, &d, alpha0) {
                    Ok(ls) => {
                        let s: Vec<f64> = ls.x.iter().zip(&theta).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                        memory.push(s, y);
                        (theta, f, g) = (ls.x, ls.f, ls.g);
                        *failures = 0;
                        *step_scale = 1.0;
                    }
                    Err(Error::LineSearchFailure) => {
                        *failures += 1;
                        memory.reset();
                        if *failures == 1 {
                            *step_scale *= 0.5;
                            report.events.push(format!("epoch {epoch}: line search failed, restarting L-BFGS"));
                        } else {
                            report.events.push(format!("epoch {epoch}: line search failed again, switching to Adam"));
                            switch_to_adam = true;
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            Phase::Adam(adam) => {
                adam.step(&mut theta, &g);
                (f, g) = objective(&theta);
            }
        }
        if switch_to_adam {
            phase = Phase::Adam(Adam::new(theta.len(), cfg.adam_lr));
        }
        if !f.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let vl = val_loss(&theta, f);
        report.train_loss.push(f);
        report.val_loss.push(vl);
        report.epochs = epoch;
        if vl < best.0 {
            best = (vl, theta.clone());
            report.best_epoch = epoch;
        } else if epoch - report.best_epoch >= cfg.patience {
            report.stop_reason = "validation patience exhausted".into();
            break;
        }
    }
    model.set_params(&best.1);
    log::info!(
        "training stopped after {} epochs ({}); best validation loss {:e} at epoch {}",
        report.epochs,
        report.stop_reason,
        best.0,
        report.best_epoch
    );
    Ok((
        NeuralSolver {
            regressor: model,
            normalizer,
            n_buses,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFitReport {
    /// Numerical rank of the feature matrix.
    pub rank: usize,
    pub n_features: usize,
    pub train_loss: f64,
}

/// Least-squares fit of the linear-feature solver. Rank-deficient problems
/// get the minimum-norm solution; the effective rank is reported.
pub fn fit_linear(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    n_buses: usize,
) -> Result<(NeuralSolver, LinearFitReport)> {
    let normalizer = Normalizer::fit(inputs, targets)?;
    let x = normalizer.normalize_inputs(inputs);
    let y = normalizer.normalize_targets(targets);
    let n = x.ncols();
    let mut phi = DMatrix::from_element(n, x.nrows() + 1, 1.0);
    phi.columns_mut(1, x.nrows()).copy_from(&x.transpose());

    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (n.max(phi.ncols()) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let a_t = svd
        .solve(&y.transpose(), eps)
        .map_err(|e| Error::Validation(format!("least-squares solve failed: {e}")))?;
    if rank < phi.ncols() {
        log::warn!("linear features are rank deficient ({rank} of {}); using the minimum-norm fit", phi.ncols());
    }
    let mut regressor = Regressor::new(FeatureKind::Linear, inputs.ncols(), targets.ncols(), [1, 1], 0);
    regressor.a = a_t.transpose();
    let train_loss = regressor.loss(&x, &y);
    Ok((
        NeuralSolver {
            regressor,
            normalizer,
            n_buses,
        },
        LinearFitReport {
            rank,
            n_features: phi.ncols(),
            train_loss,
        },
    ))
}
