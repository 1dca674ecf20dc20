//! `pf`, `qss` and `opf`: power-system operation tasks solved on the
//! trained solver's prediction, or on exact solves with `--oracle`.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use rayon::prelude::*;
use rpf_core::csvio::Table;
use rpf_core::dataset::{generate_dataset, record_rng, sample_oc, GenerationBase, SamplingConfig, SamplingMode};
use rpf_core::network::Network;
use rpf_core::neural_solver::{Formulation, NeuralSolver, PowerFlowModel};
use rpf_core::po::{
    describe, grid_search_oracle, solve_po_opf, solve_po_pf, solve_po_qss, ControlPartition, DroopConfig,
    ExactModel, GridSpec, OpfSpec, PoConfig, PoResult,
};
use rpf_core::residual::SlackSpec;
use rpf_core::rpf_solver::{solve_feasible, SolverConfig};
use rpf_core::state::ControlVector;
use rpf_core::stats::{median, spearman};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{parse_pair, usage, Context};
use crate::data::{load_model, MODEL_FILE};

/// Seed offsets of the OC samples, distinct from those of `gen`.
const PF_SEED_OFFSET: u64 = 5;
const QSS_FEASIBLE_SEED_OFFSET: u64 = 6;
const QSS_INFEASIBLE_SEED_OFFSET: u64 = 7;

/// The power-flow model behind a PO run.
enum Model<'a> {
    Neural(NeuralSolver),
    Exact(ExactModel<'a>),
}

impl Model<'_> {
    fn as_dyn(&self) -> &(dyn PowerFlowModel + Sync) {
        match self {
            Model::Neural(m) => m,
            Model::Exact(m) => m,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Model::Neural(_) => "neural",
            Model::Exact(_) => "oracle",
        }
    }
}

fn load_po_model<'a>(ctx: &'a Context, path: &Option<PathBuf>, oracle: bool) -> Result<Model<'a>> {
    if oracle {
        return Ok(Model::Exact(ExactModel::new(&ctx.network)));
    }
    let path = ctx.out_or(path, MODEL_FILE);
    let (checkpoint, solver) = load_model(&path, &ctx.network)?;
    if checkpoint.formulation != Formulation::Rpf {
        return Err(usage(format!(
            "{} maps bus-type inputs; operation tasks need a model trained with --formulation rpf",
            path.display()
        )));
    }
    Ok(Model::Neural(solver))
}

fn total_load(net: &Network, u: &ControlVector) -> f64 {
    (0..net.loads.len()).map(|i| u[net.layout().load_p(i)]).sum()
}

/// Parses a slack choice: `genK` (the generator at bus K) or `distributed`
/// (all generators in equal parts).
fn parse_slack(net: &Network, s: &str) -> Result<SlackSpec> {
    if s == "distributed" {
        let all: Vec<usize> = (0..net.generators.len()).collect();
        return Ok(SlackSpec::uniform(&all)?);
    }
    let found = s
        .strip_prefix("gen")
        .and_then(|id| id.parse::<usize>().ok())
        .and_then(|id| net.generators.iter().position(|g| net.buses[g.bus].id == id));
    match found {
        Some(j) => Ok(SlackSpec::single(j)),
        None => Err(usage(format!(
            "unknown slack `{s}`; use `distributed` or one of {}",
            net.generators.iter().map(|g| format!("gen{}", net.buses[g.bus].id)).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn cell_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cols(c: &[&str]) -> Vec<String> {
    c.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PfArgs {
    /// Trained checkpoint [default: <out-dir>/model.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use exact residual solves instead of the trained solver.
    #[arg(long)]
    pub oracle: bool,
    /// Number of OCs [default: 500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Slack variable: `genK` or `distributed` [default: gen1].
    #[arg(long)]
    pub slack: Option<String>,
    /// Also render |error| against predicted ρ as SVG.
    #[arg(long)]
    pub svg: bool,
}

/// Slack recovery on OCs whose generation matches the load exactly, so
/// that the network losses must be picked up by the slack.
pub fn pf(ctx: &Context, args: PfArgs) -> Result<()> {
    let net = &ctx.network;
    let model = load_po_model(ctx, &args.model, args.oracle)?;
    let slack_name = args.slack.clone().unwrap_or_else(|| "gen1".into());
    let slack = parse_slack(net, &slack_name)?;
    let n = args.n.unwrap_or(500);
    let mut sampling = SamplingConfig::new(SamplingMode::Infeasible, n, ctx.seed(PF_SEED_OFFSET));
    sampling.generation_base = GenerationBase::Lossless;
    sampling.gen_scale_range = (1.0, 1.0);
    let po_cfg = PoConfig::default();

    let rows: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let u0 = sample_oc(&mut record_rng(sampling.seed, i), net, &sampling);
            let truth = solve_feasible(net, &u0, &slack, &SolverConfig::default()).map(|s| s.slack_value);
            let est = solve_po_pf(model.as_dyn(), net, &u0, &slack, &po_cfg);
            (total_load(net, &u0), truth, est)
        })
        .collect();

    let (mut errors, mut rhos, mut failures) = (Vec::new(), Vec::new(), 0);
    let mut body = Vec::new();
    for (k, (load, truth, est)) in rows.iter().enumerate() {
        let (truth, hat, rho_hat, iters, status) = match (truth, est) {
            (Ok(t), Ok(r)) => {
                let hat = r.parameter.unwrap_or(f64::NAN);
                errors.push((hat - t).abs());
                rhos.push(r.rho_hat);
                (Some(*t), Some(hat), Some(r.rho_hat), Some(r.iterations as f64), "ok".to_string())
            }
            (t, r) => {
                failures += 1;
                let msg = [t.as_ref().err().map(|e| format!("truth: {e}")), r.as_ref().err().map(|e| format!("po: {e}"))]
                    .into_iter()
                    .flatten()
                    .collect::<Vec<_>>()
                    .join("; ");
                (t.as_ref().ok().copied(), None, None, None, format!("failed: {}", msg.replace(',', ";")))
            }
        };
        body.push(vec![
            k.to_string(),
            load.to_string(),
            cell_str(truth),
            cell_str(hat),
            cell_str(truth.zip(hat).map(|(t, h)| (h - t).abs())),
            cell_str(rho_hat),
            cell_str(iters),
            status,
        ]);
    }
    if n > 0 && failures == n {
        bail!("every slack recovery failed");
    }
    let summary = json!({
        "model": model.name(),
        "slack": slack_name,
        "n": n,
        "failures": failures,
        "median_abs_error": median(&errors),
        "spearman_error_rho_hat": if errors.len() > 2 { spearman(&errors, &rhos) } else { f64::NAN },
    });
    println!("{summary}");
    let prov = ctx.provenance("pf", &args)?;
    let mut table = Table::new(
        ctx.header(&prov, json!({ "po": describe("po-pf", &po_cfg), "summary": summary })),
        cols(&["oc", "total_load", "u_s_true", "u_s_hat", "abs_error", "rho_hat", "iterations", "status"]),
    );
    table.rows = body;
    ctx.write_table(&ctx.out("pf_results.csv"), &table)?;
    if args.svg {
        let pts: Vec<(f64, f64)> = rhos.iter().copied().zip(errors.iter().copied()).collect();
        ctx.write(
            &ctx.out("pf_results.svg"),
            &crate::svg::scatter("slack recovery", "predicted ρ at solution", "|û_s − u_s*| (pu)", &pts, true, true),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct QssArgs {
    /// Trained checkpoint [default: <out-dir>/model.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use exact residual solves instead of the trained solver.
    #[arg(long)]
    pub oracle: bool,
    /// Number of OCs [default: 500].
    #[arg(long)]
    pub n: Option<usize>,
    /// Droop constant R [default: 0.04].
    #[arg(long)]
    pub r: Option<f64>,
    /// Start from feasible OCs instead of sampled infeasible ones.
    #[arg(long)]
    pub feasible: bool,
    /// Also render the frequency deviation against loading as SVG.
    #[arg(long)]
    pub svg: bool,
}

/// Frequency under droop. The reference ω comes from an exact feasible
/// solve whose slack is distributed in proportion to the droop gains.
pub fn qss(ctx: &Context, args: QssArgs) -> Result<()> {
    let net = &ctx.network;
    let model = load_po_model(ctx, &args.model, args.oracle)?;
    let mut droop = DroopConfig::from_network(net);
    if let Some(r) = args.r {
        droop.r = r;
    }
    droop.validate(net.generators.len()).map_err(|e| usage(e.to_string()))?;
    let truth_slack = droop.slack_spec()?;
    let n = args.n.unwrap_or(500);
    let ocs: Vec<ControlVector> = if args.feasible {
        let cfg = SamplingConfig::new(SamplingMode::Feasible, n, ctx.seed(QSS_FEASIBLE_SEED_OFFSET));
        generate_dataset(net, &cfg)?.0.records.into_iter().map(|r| r.u).collect()
    } else {
        let cfg = SamplingConfig::new(SamplingMode::Infeasible, n, ctx.seed(QSS_INFEASIBLE_SEED_OFFSET));
        (0..n as u64).map(|i| sample_oc(&mut record_rng(cfg.seed, i), net, &cfg)).collect()
    };
    let po_cfg = PoConfig::default();
    let rows: Vec<_> = ocs
        .par_iter()
        .map(|u0| {
            let truth = solve_feasible(net, u0, &truth_slack, &SolverConfig::default())
                .map(|s| droop.omega_from_slack(s.slack_value));
            (total_load(net, u0), truth, solve_po_qss(model.as_dyn(), net, u0, &droop, &po_cfg))
        })
        .collect();

    let w0 = droop.omega0;
    let (mut failures, mut signs, mut sign_total) = (0, 0, 0);
    let (mut abs_dev, mut pts) = (Vec::new(), Vec::new());
    let mut body = Vec::new();
    for (k, (load, truth, est)) in rows.iter().enumerate() {
        let truth = truth.as_ref().ok().copied();
        let (hat, rho_hat, status) = match est {
            Ok(r) => (r.parameter, Some(r.rho_hat), "ok".to_string()),
            Err(e) => (None, None, format!("failed: {}", e.to_string().replace(',', ";"))),
        };
        let status = if truth.is_none() && hat.is_some() { "failed: reference solve".to_string() } else { status };
        let sign_ok = match (truth, hat) {
            (Some(t), Some(h)) if (t - w0).abs() > 1e-8 => {
                sign_total += 1;
                let ok = (h - w0).signum() == (t - w0).signum();
                signs += ok as usize;
                Some(ok)
            }
            _ => None,
        };
        match (truth, hat) {
            (Some(_), Some(h)) => {
                abs_dev.push((h - w0).abs());
                pts.push((*load, h - w0));
            }
            _ => failures += 1,
        }
        body.push(vec![
            k.to_string(),
            load.to_string(),
            cell_str(truth),
            cell_str(hat),
            cell_str(truth.map(|t| t - w0)),
            cell_str(hat.map(|h| h - w0)),
            cell_str(truth.zip(hat).map(|(t, h)| (h - t).abs())),
            sign_ok.map(|b| b.to_string()).unwrap_or_default(),
            cell_str(rho_hat),
            status,
        ]);
    }
    if n > 0 && failures == n {
        bail!("every QSS solve failed");
    }
    let summary = json!({
        "model": model.name(),
        "r": droop.r,
        "feasible_start": args.feasible,
        "n": n,
        "failures": failures,
        "sign_checked": sign_total,
        "sign_correct": signs,
        "max_abs_deviation": abs_dev.iter().copied().fold(0.0f64, f64::max),
    });
    println!("{summary}");
    let prov = ctx.provenance("qss", &args)?;
    let mut table = Table::new(
        ctx.header(&prov, json!({ "po": describe("po-qss", &po_cfg), "droop": droop, "summary": summary })),
        cols(&[
            "oc", "total_load", "omega_true", "omega_hat", "deviation_true", "deviation_hat", "abs_error", "sign_ok",
            "rho_hat", "status",
        ]),
    );
    table.rows = body;
    ctx.write_table(&ctx.out("qss_results.csv"), &table)?;
    if args.svg {
        ctx.write(
            &ctx.out("qss_results.svg"),
            &crate::svg::scatter("frequency under droop", "total load (pu)", "ω − ω0 (pu)", &pts, false, false),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct OpfArgs {
    /// Trained checkpoint [default: <out-dir>/model.json].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use exact residual solves instead of the trained solver.
    #[arg(long)]
    pub oracle: bool,
    /// Decision controls by label [default: PM_gen2,PM_gen3].
    #[arg(long, value_delimiter = ',')]
    pub decisions: Option<Vec<String>>,
    /// Also evaluate an N×N (or N) grid of the decisions with exact solves.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Weight on the power-flow residual [default: 1000].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Final residual weight, reached by ×10 continuation [default: --lambda].
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// Voltage band `lo,hi` applied to every bus [default: the case limits].
    #[arg(long)]
    pub v_bounds: Option<String>,
    /// Multiplier on the case's generator cost coefficients [default: 0.001].
    #[arg(long)]
    pub cost_scale: Option<f64>,
    /// Also render the grid as an SVG heat map (needs --grid).
    #[arg(long)]
    pub svg: bool,
}

fn decision_indices(net: &Network, labels: &[String]) -> Result<Vec<usize>> {
    let all = net.control_labels();
    labels
        .iter()
        .map(|l| {
            all.iter()
                .position(|a| a == l.trim())
                .ok_or_else(|| usage(format!("unknown control `{l}`; available: {}", all.join(", "))))
        })
        .collect()
}

pub fn opf(ctx: &Context, args: OpfArgs) -> Result<()> {
    let net = &ctx.network;
    let model = load_po_model(ctx, &args.model, args.oracle)?;
    let labels = net.control_labels();
    let decision_labels = args.decisions.clone().unwrap_or_else(|| vec!["PM_gen2".into(), "PM_gen3".into()]);
    let partition = ControlPartition::new(decision_indices(net, &decision_labels)?, net.n_controls())
        .map_err(|e| usage(e.to_string()))?;

    let mut spec = OpfSpec::generation_cost(net, args.cost_scale.unwrap_or(1e-3));
    if let Some(l) = args.lambda {
        spec.lambda = l;
        spec.lambda_max = l;
    }
    if let Some(l) = args.lambda_max {
        spec.lambda_max = l;
    }
    if let Some(s) = &args.v_bounds {
        let band = parse_pair(s).map_err(|e| usage(format!("--v-bounds: {e}")))?;
        spec.v_bounds = Some(vec![band; net.n_buses()]);
    }
    spec.validate(net.n_controls(), net.n_buses()).map_err(|e| usage(e.to_string()))?;

    let u0 = net.nominal_controls();
    let po_cfg = PoConfig::default();
    let result: PoResult = solve_po_opf(model.as_dyn(), net, &spec, &partition, &u0, &po_cfg)?;
    let exact = ExactModel::new(net).solve(&result.u_solution).ok();

    let prov = ctx.provenance("opf", &args)?;
    let header = ctx.header(&prov, json!({ "po": describe("po-opf", &po_cfg), "model": model.name() }));
    let mut out = Table::new(header.clone(), cols(&["quantity", "value"]));
    let mut put = |q: String, v: String| out.push(vec![q, v]);
    put("objective".into(), result.objective.to_string());
    put("cost".into(), spec.cost(&result.u_solution).to_string());
    put("rho_hat".into(), result.rho_hat.to_string());
    put("rho_exact".into(), cell_str(exact.as_ref().map(|s| s.rho)));
    put("iterations".into(), result.iterations.to_string());
    put("violations".into(), result.violations.len().to_string());
    put(
        "max_violation".into(),
        result.violations.iter().map(|v| v.amount).fold(0.0f64, f64::max).to_string(),
    );
    for (k, label) in labels.iter().enumerate() {
        put(format!("u:{label}"), result.u_solution[k].to_string());
    }
    println!(
        "optimum: {} (objective {:.6e}, predicted ρ {:.3e})",
        partition
            .decisions
            .iter()
            .map(|&k| format!("{} = {:.6}", labels[k], result.u_solution[k]))
            .collect::<Vec<_>>()
            .join(", "),
        result.objective,
        result.rho_hat
    );

    if let Some(resolution) = args.grid {
        let grid = GridSpec {
            ranges: partition.decisions.iter().map(|&k| spec.u_bounds[k]).collect(),
            resolution,
        };
        let neural = match &model {
            Model::Neural(m) => Some(m as &(dyn PowerFlowModel + Sync)),
            Model::Exact(_) => None,
        };
        let table = grid_search_oracle(net, &spec, &partition, &u0, &grid, neural, &SolverConfig::default())
            .map_err(|e| usage(e.to_string()))?;
        let solution_cell: Vec<usize> = partition
            .decisions
            .iter()
            .enumerate()
            .map(|(d, &k)| grid.cell(d, result.u_solution[k]))
            .collect();
        put("solution_cell".into(), format!("{solution_cell:?}").replace(", ", " "));
        if let Some(a) = table.argmin_exact {
            let best = &table.points[a].cell;
            let dist = best.iter().zip(&solution_cell).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0);
            put("grid_argmin_exact_cell".into(), format!("{best:?}").replace(", ", " "));
            put("grid_linf_cells".into(), dist.to_string());
            println!("grid optimum cell {best:?}, PO solution cell {solution_cell:?}: ℓ∞ distance {dist}");
        }
        if let Some(a) = table.argmin_predicted {
            put("grid_argmin_predicted_cell".into(), format!("{:?}", table.points[a].cell).replace(", ", " "));
        }
        ctx.write_table(&ctx.out("opf_grid.csv"), &table.to_table(&labels, header))?;
        if args.svg && partition.decisions.len() == 2 {
            let values: Vec<Option<f64>> = table.points.iter().map(|p| p.objective.map(|o| o.max(1e-300).log10())).collect();
            let mut markers = vec![(solution_cell[0], solution_cell[1], "black")];
            if let Some(a) = table.argmin_exact {
                markers.push((table.points[a].cell[0], table.points[a].cell[1], "red"));
            }
            if let Some(a) = table.argmin_predicted {
                markers.push((table.points[a].cell[0], table.points[a].cell[1], "orange"));
            }
            let d = &partition.decisions;
            ctx.write(
                &ctx.out("opf_grid.svg"),
                &crate::svg::heat_grid("log10 OPF objective", &labels[d[0]], &labels[d[1]], resolution, &values, &markers),
            )?;
        }
    }
    ctx.write_table(&ctx.out("opf_result.csv"), &out)
}
