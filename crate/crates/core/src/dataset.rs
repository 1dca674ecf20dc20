//! Operating-condition sampling and `(u, v*)` dataset generation.
//!
//! Each record is drawn from its own ChaCha8 stream (`seed`, stream = record
//! index), so datasets are identical regardless of thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio::{parse_f64, Provenance, Table};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::residual::{assemble_residual, rho, SlackSpec};
use crate::rpf_solver::{solve_feasible, solve_rpf, SolverConfig, FEASIBILITY_TOL};
use crate::state::{ControlVector, VoltageState};

/// Largest tolerated share of failed solves during generation.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Tolerated drift between a stored and a recomputed `ρ`.
const RHO_DRIFT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Controls are slack-adjusted so that `ρ = 0`.
    Feasible,
    /// Controls are kept as sampled; `v*` minimises `ρ`.
    Infeasible,
}

/// How total mechanical power is sized before any scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GenerationBase {
    /// `Σ P_M = S`, the sampled total apparent power.
    #[default]
    Apparent,
    /// `Σ P_M = Σ P_load`, balanced as if the network were lossless.
    Lossless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub s_range: (f64, f64),
    pub pf_range: (f64, f64),
    pub vref_range: (f64, f64),
    pub gen_scale_range: (f64, f64),
    pub n_samples: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub slack: SlackSpec,
    #[serde(default)]
    pub generation_base: GenerationBase,
}

impl SamplingConfig {
    pub fn new(mode: SamplingMode, n_samples: usize, seed: u64) -> Self {
        Self {
            s_range: (1.0, 4.0),
            pf_range: (0.9, 1.0),
            vref_range: (1.0, 1.05),
            gen_scale_range: (1.0, 1.08),
            n_samples,
            seed,
            mode,
            slack: SlackSpec::single(0),
            generation_base: GenerationBase::Apparent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("s_range", self.s_range),
            ("pf_range", self.pf_range),
            ("vref_range", self.vref_range),
            ("gen_scale_range", self.gen_scale_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Validation(format!("{name} must be a finite range with lo ≤ hi")));
            }
        }
        if self.pf_range.0 < 0.0 || self.pf_range.1 > 1.0 {
            return Err(Error::Validation("power factors must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Symmetric Dirichlet(1) draw via normalised unit exponentials.
fn dirichlet_shares(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

/// Draws one operating condition.
pub fn sample_oc(rng: &mut ChaCha8Rng, network: &Network, cfg: &SamplingConfig) -> ControlVector {
    let layout = network.layout();
    let mut u = vec![0.0; layout.len()];
    let s_total = uniform(rng, cfg.s_range);
    let load_shares = dirichlet_shares(rng, layout.n_loads());
    let mut p_load = 0.0;
    for (i, eta) in load_shares.iter().enumerate() {
        let psi = uniform(rng, cfg.pf_range);
        u[layout.load_p(i)] = s_total * eta * psi;
        u[layout.load_q(i)] = s_total * eta * (1.0 - psi * psi).max(0.0).sqrt();
        p_load += u[layout.load_p(i)];
    }
    let gen_shares = dirichlet_shares(rng, layout.n_gens());
    let scale = match cfg.mode {
        SamplingMode::Infeasible => uniform(rng, cfg.gen_scale_range),
        SamplingMode::Feasible => 1.0,
    };
    let base = match cfg.generation_base {
        GenerationBase::Apparent => s_total,
        GenerationBase::Lossless => p_load,
    };
    for (j, eta) in gen_shares.iter().enumerate() {
        u[layout.gen_pm(j)] = base * eta * scale;
        u[layout.gen_vref(j)] = uniform(rng, cfg.vref_range);
    }
    ControlVector::new(u)
}

/// The RNG stream used for record `index`.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub u: ControlVector,
    pub v_star: VoltageState,
    pub rho: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub network_fingerprint: String,
    pub config: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub attempted: usize,
    pub dropped: usize,
    /// Indices of the RNG streams whose solves failed.
    pub dropped_indices: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Controls as rows of an `n × m` matrix.
    pub fn inputs(&self) -> DMatrix<f64> {
        let m = self.records.first().map_or(0, |r| r.u.len());
        DMatrix::from_fn(self.len(), m, |i, j| self.records[i].u[j])
    }

    /// Voltage solutions as rows of an `n × (|N|+|B|)` matrix.
    pub fn targets(&self) -> DMatrix<f64> {
        let flat: Vec<Vec<f64>> = self.records.iter().map(|r| r.v_star.to_flat()).collect();
        let d = flat.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.len(), d, |i, j| flat[i][j])
    }

    /// A dataset holding the given subset of records, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            network_fingerprint: self.network_fingerprint.clone(),
            config: self.config.clone(),
        }
    }

    /// Concatenation of two datasets on the same network.
    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.network_fingerprint != other.network_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.network_fingerprint.clone(),
                found: other.network_fingerprint.clone(),
            });
        }
        let mut out = self.clone();
        out.records.extend(other.records.iter().cloned());
        Ok(out)
    }
}

fn solve_record(network: &Network, cfg: &SamplingConfig, solver: &SolverConfig, index: u64) -> Option<Record> {
    let mut rng = record_rng(cfg.seed, index);
    let u = sample_oc(&mut rng, network, cfg);
    match cfg.mode {
        SamplingMode::Feasible => {
            let sol = solve_feasible(network, &u, &cfg.slack, solver).ok()?;
            if !sol.v_star.in_domain() {
                return None;
            }
            Some(Record {
                u: sol.u_adjusted,
                v_star: sol.v_star,
                rho: sol.rho,
                feasible: true,
            })
        }
        SamplingMode::Infeasible => {
            let sol = solve_rpf(network, &u, solver).ok()?;
            if !sol.converged || !sol.v_star.in_domain() {
                return None;
            }
            Some(Record {
                feasible: sol.rho <= FEASIBILITY_TOL,
                u,
                v_star: sol.v_star,
                rho: sol.rho,
            })
        }
    }
}

/// Generates `cfg.n_samples` records. Failed solves are dropped and replaced
/// by further streams; more than 5% failures abort generation.
pub fn generate_dataset(network: &Network, cfg: &SamplingConfig) -> Result<(Dataset, GenerationReport)> {
    cfg.validate()?;
    cfg.slack.validate(network.generators.len())?;
    if network.loads.is_empty() || network.generators.is_empty() {
        return Err(Error::Validation("sampling needs at least one load and one generator".into()));
    }
    let solver = SolverConfig::default();
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut dropped_indices = Vec::new();
    let mut next: u64 = 0;
    while records.len() < cfg.n_samples {
        let want = (cfg.n_samples - records.len()) as u64;
        let batch: Vec<(u64, Option<Record>)> = (next..next + want)
            .into_par_iter()
            .map(|i| (i, solve_record(network, cfg, &solver, i)))
            .collect();
        next += want;
        for (i, rec) in batch {
            match rec {
                Some(r) => records.push(r),
                None => dropped_indices.push(i),
            }
        }
        if dropped_indices.len() as f64 > MAX_FAILURE_SHARE * next as f64 {
            return Err(Error::Generation {
                failed: dropped_indices.len(),
                attempted: next as usize,
            });
        }
    }
    if !dropped_indices.is_empty() {
        log::warn!("dropped {} of {} operating conditions", dropped_indices.len(), next);
    }
    let report = GenerationReport {
        attempted: next as usize,
        dropped: dropped_indices.len(),
        dropped_indices,
    };
    Ok((
        Dataset {
            records,
            network_fingerprint: network.fingerprint(),
            config: cfg.clone(),
        },
        report,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    network_fingerprint: String,
    n_buses: usize,
    n_branches: usize,
    n_controls: usize,
    config: SamplingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

const FORMAT_TAG: &str = "rpf-dataset/1";

/// CSV text: JSON header, column names, then one row per record with
/// controls, magnitudes, branch angles, `rho` and the feasibility flag.
pub fn dataset_to_csv(dataset: &Dataset, network: &Network) -> Result<String> {
    dataset_to_csv_with(dataset, network, None)
}

/// [`dataset_to_csv`] with a provenance block in the header.
pub fn dataset_to_csv_with(dataset: &Dataset, network: &Network, provenance: Option<&Provenance>) -> Result<String> {
    let header = DatasetHeader {
        format: FORMAT_TAG.into(),
        network_fingerprint: dataset.network_fingerprint.clone(),
        n_buses: network.n_buses(),
        n_branches: network.n_branches(),
        n_controls: network.n_controls(),
        config: dataset.config.clone(),
        provenance: provenance.cloned(),
    };
    let mut columns = network.control_labels();
    columns.extend(network.voltage_labels());
    columns.push("rho".into());
    columns.push("feasible".into());
    let mut table = Table::new(serde_json::to_value(&header)?, columns);
    for r in &dataset.records {
        let mut row: Vec<String> = r.u.entries.iter().map(f64::to_string).collect();
        row.extend(r.v_star.to_flat().iter().map(f64::to_string));
        row.push(r.rho.to_string());
        row.push(r.feasible.to_string());
        table.push(row);
    }
    Ok(table.to_csv())
}

pub fn dataset_from_csv(text: &str, network: &Network) -> Result<Dataset> {
    let table = Table::parse(text)?;
    let header: DatasetHeader =
        serde_json::from_value(table.header).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Format(format!("unsupported dataset format `{}`", header.format)));
    }
    let expected = network.fingerprint();
    if header.network_fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: header.network_fingerprint,
        });
    }
    let m = network.n_controls();
    let nv = network.n_voltage_vars();
    if table.columns.len() != m + nv + 2 {
        return Err(Error::Format("column count does not match the network".into()));
    }
    let mut records = Vec::with_capacity(table.rows.len());
    for (k, row) in table.rows.iter().enumerate() {
        let nums = row[..m + nv + 1].iter().map(|f| parse_f64(f)).collect::<Result<Vec<f64>>>()?;
        let feasible = match row[m + nv + 1].as_str() {
            "true" => true,
            "false" => false,
            other => return Err(Error::Format(format!("record {k}: bad feasible flag `{other}`"))),
        };
        let u = ControlVector::new(nums[..m].to_vec());
        let v_star = VoltageState::from_flat(&nums[m..m + nv], network.n_buses());
        let stored = nums[m + nv];
        let recomputed = rho(&assemble_residual(network, &v_star, &u)?);
        if (stored - recomputed).abs() > RHO_DRIFT_TOL || (feasible && recomputed > FEASIBILITY_TOL) {
            return Err(Error::Format(format!(
                "record {k}: stored rho {stored:e} disagrees with recomputed {recomputed:e}"
            )));
        }
        records.push(Record {
            u,
            v_star,
            rho: stored,
            feasible,
        });
    }
    Ok(Dataset {
        records,
        network_fingerprint: header.network_fingerprint,
        config: header.config,
    })
}

pub fn save_dataset(dataset: &Dataset, network: &Network, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(dataset, network)?)?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path, network: &Network) -> Result<Dataset> {
    dataset_from_csv(&std::fs::read_to_string(path)?, network)
}
